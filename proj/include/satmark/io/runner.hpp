#pragma once

#include <memory>
#include <optional>
#include <string>

#include "satmark/evalkit/evalkit.hpp"
#include "satmark/io/config.hpp"
#include "satmark/otbound/otbound.hpp"
#include "satmark/train/train.hpp"

namespace satmark::io {

// Config written next to every checkpoint.
std::string sidecar_path(const std::string& checkpoint);

Digest decoder_digest(const toygen::SurrogateModel& s);
Digest surrogate_digest(const toygen::SurrogateModel& s);

struct LoadedModel {
  RunConfig config;
  std::unique_ptr<toygen::SurrogateModel> surrogate;
  std::unique_ptr<wmnet::WatermarkModel> model;
  long step = 0;
};

// Loads a checkpoint with its config: the explicit one when given, the
// sidecar otherwise. Throws ParseError when the config hash does not match.
LoadedModel load_model(const std::string& checkpoint, const std::optional<std::string>& config_path = {});

struct TrainRequest {
  RunConfig config;
  std::string out;
  std::optional<std::string> resume;
  std::optional<long> until;
  std::string log_path;  // empty: no log
};

struct TrainOutcome {
  long start_step = 0;
  long final_step = 0;
  std::optional<double> first_total;
  std::optional<double> last_total;
  std::optional<double> last_clean_accuracy;
};

// Trains (or resumes) and writes the checkpoint plus its sidecar config. On
// a non-finite loss a diagnostic checkpoint "<out>.diag" is written before the
// NumericError propagates.
TrainOutcome run_training(const TrainRequest& req);

Json to_json(const train::LogRecord& r);
Json to_json(const evalkit::MetricsReport& r);
Json to_json(const evalkit::DetectReport& r);
Json to_json(const evalkit::IdentifyReport& r);
Json to_json(const otbound::BoundReport& r);

// Default distribution a model was trained on, for the bound.
toygen::DistKind train_distribution(train::TrainMode m);

}  // namespace satmark::io

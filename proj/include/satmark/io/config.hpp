#pragma once

#include "json.hpp"

#include <string>

#include "satmark/evalkit/evalkit.hpp"
#include "satmark/io/io.hpp"
#include "satmark/toygen/surrogate.hpp"
#include "satmark/train/train.hpp"

namespace satmark::io {

using Json = nlohmann::ordered_json;

// Everything a run needs. Sections: generator, model, loss, optimizer,
// attacks, train, eval, outputs. Defaults are the smoke profile.
struct RunConfig {
  toygen::GeneratorConfig generator;
  train::TrainConfig train;  // includes model, loss, optimizer and attack ranges
  long eval_n = 1000;
  std::uint64_t eval_seed = 1;
  std::string log_path;  // empty: no training log unless --log is given

  RunConfig();
  void validate() const;
};

Json to_json(const RunConfig& c);
// Strict: every section and key must be known; missing keys keep their defaults.
RunConfig run_config_from_json(const Json& j);
RunConfig load_run_config(const std::string& path);

// Canonical text of the sections that determine model state and training
// trajectory (eval, outputs and thread count excluded).
std::string hashed_text(const RunConfig& c);
Digest config_hash(const RunConfig& c);

// Doubles rounded to 9 significant digits; non-finite values become null.
Json canonical(const Json& j);
// canonical(j) pretty-printed with a trailing newline.
std::string dump(const Json& j);
// Single-line form for logs.
std::string dump_line(const Json& j);

}  // namespace satmark::io

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dusss/models.hpp"
#include "dusss/pretrain.hpp"
#include "dusss/semiseg.hpp"
#include "dusss/uncertainty.hpp"

namespace dusss {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

struct RunConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  SSSConfig sss;
  bool sss_enabled = true;
  double tau_init = 0.07;
  bool imc = true;
  PretrainOptions pretrain;
  SemiOptions semi;
  std::string data_dir;
  std::string vlm_path;  // checkpoint stem
  std::string out_dir;

  RunConfig();

  // Flat dotted keys, e.g. "semi.alpha". Unknown keys, type errors and
  // out-of-range values are collected and thrown together as a ConfigError.
  static std::vector<std::string> keys();
  void apply_json(const std::string& text);
  void apply_file(const std::filesystem::path& path);
  // `value` is parsed as JSON, falling back to a bare string.
  void set(const std::string& key, const std::string& value);
  std::string to_json() const;

  // Throws ConfigError listing every violation.
  void validate() const;
  std::vector<std::string> problems() const;

  // Copies the shared fields (seed, SSS switches) into the stage options.
  PretrainOptions pretrain_options() const;
  SemiOptions semi_options() const;
};

}  // namespace dusss

#include "dusss/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "json.hpp"

namespace dusss {

namespace {

using json = nlohmann::json;

std::string join(const std::vector<std::string>& items) {
  std::string out = "invalid configuration:";
  for (const auto& s : items) out += "\n  - " + s;
  return out;
}

struct Field {
  std::string key;
  // Returns an error message, empty on success.
  std::function<std::string(const json&)> set;
  std::function<json()> get;
};

Field size_field(const std::string& key, std::size_t& ref) {
  return {key,
          [&ref, key](const json& v) -> std::string {
            if (!v.is_number_integer() || v.get<long long>() < 0)
              return key + ": expected a non-negative integer, got " + v.dump();
            ref = v.get<std::size_t>();
            return {};
          },
          [&ref] { return json(ref); }};
}

Field u64_field(const std::string& key, std::uint64_t& ref) {
  return {key,
          [&ref, key](const json& v) -> std::string {
            if (!v.is_number_integer() || v.get<long long>() < 0)
              return key + ": expected a non-negative integer, got " + v.dump();
            ref = v.get<std::uint64_t>();
            return {};
          },
          [&ref] { return json(ref); }};
}

Field double_field(const std::string& key, double& ref) {
  return {key,
          [&ref, key](const json& v) -> std::string {
            if (!v.is_number()) return key + ": expected a number, got " + v.dump();
            ref = v.get<double>();
            return {};
          },
          [&ref] { return json(ref); }};
}

Field bool_field(const std::string& key, bool& ref) {
  return {key,
          [&ref, key](const json& v) -> std::string {
            if (!v.is_boolean()) return key + ": expected true or false, got " + v.dump();
            ref = v.get<bool>();
            return {};
          },
          [&ref] { return json(ref); }};
}

Field string_field(const std::string& key, std::string& ref) {
  return {key,
          [&ref, key](const json& v) -> std::string {
            if (!v.is_string()) return key + ": expected a string, got " + v.dump();
            ref = v.get<std::string>();
            return {};
          },
          [&ref] { return json(ref); }};
}

std::vector<Field> fields(RunConfig& c) {
  std::vector<Field> f;
  f.push_back(u64_field("seed", c.seed));
  f.push_back(size_field("model.image_size", c.model.image_size));
  f.push_back(size_field("model.patch", c.model.patch));
  f.push_back(size_field("model.d", c.model.d));
  f.push_back(size_field("model.d_s", c.model.d_s));
  f.push_back(size_field("model.d_u", c.model.d_u));
  f.push_back(size_field("model.l_max", c.model.l_max));
  f.push_back(size_field("model.attn_heads", c.model.attn_heads));
  f.push_back(size_field("model.ground_kernel", c.model.ground_kernel));
  f.push_back(size_field("model.seg_channels", c.model.seg_channels));
  f.push_back(size_field("model.stem_channels", c.model.stem_channels));
  f.push_back(double_field("sss.a", c.sss.a));
  f.push_back(double_field("sss.b", c.sss.b));
  f.push_back(double_field("sss.lambda", c.sss.lambda));
  f.push_back(bool_field("sss.enabled", c.sss_enabled));
  f.push_back(double_field("contrastive.tau_init", c.tau_init));
  f.push_back(bool_field("contrastive.imc", c.imc));
  f.push_back(size_field("pretrain.epochs", c.pretrain.epochs));
  f.push_back(size_field("pretrain.batch_size", c.pretrain.batch_size));
  f.push_back(double_field("pretrain.lr", c.pretrain.adam.lr));
  f.push_back(double_field("pretrain.w_tg", c.pretrain.w_tg));
  f.push_back(double_field("pretrain.view_noise", c.pretrain.view_noise));
  f.push_back(double_field("pretrain.brightness", c.pretrain.augment.brightness));
  f.push_back(double_field("pretrain.synonym_prob", c.pretrain.augment.synonym_prob));
  f.push_back(size_field("semi.epochs", c.semi.max_epochs));
  f.push_back(size_field("semi.patience", c.semi.patience));
  f.push_back(size_field("semi.batch_labeled", c.semi.batch_labeled));
  f.push_back(size_field("semi.batch_unlabeled", c.semi.batch_unlabeled));
  f.push_back(double_field("semi.lr", c.semi.adam.lr));
  f.push_back(double_field("semi.alpha", c.semi.alpha));
  f.push_back({"semi.merge_mode",
               [&c](const json& v) -> std::string {
                 if (!v.is_string()) return "semi.merge_mode: expected a string, got " + v.dump();
                 try {
                   c.semi.merge = parse_merge_mode(v.get<std::string>());
                 } catch (const std::exception& e) {
                   return std::string("semi.merge_mode: ") + e.what();
                 }
                 return {};
               },
               [&c] { return json(to_string(c.semi.merge)); }});
  f.push_back(double_field("semi.w_semi", c.semi.w_semi));
  f.push_back(double_field("semi.w_tg", c.semi.w_tg));
  f.push_back(bool_field("semi.text", c.semi.use_text));
  f.push_back(double_field("semi.labeled_frac", c.semi.labeled_frac));
  f.push_back(bool_field("semi.finetune_grounding", c.semi.finetune_grounding));
  f.push_back(size_field("semi.rampup_epochs", c.semi.rampup_epochs));
  f.push_back(double_field("semi.student_noise", c.semi.student_noise));
  f.push_back(double_field("augment.flip_prob", c.semi.augment.flip_prob));
  f.push_back(double_field("augment.rotate_prob", c.semi.augment.rotate_prob));
  f.push_back(double_field("augment.brightness", c.semi.augment.brightness));
  f.push_back(double_field("augment.synonym_prob", c.semi.augment.synonym_prob));
  f.push_back(string_field("paths.data", c.data_dir));
  f.push_back(string_field("paths.vlm", c.vlm_path));
  f.push_back(string_field("paths.out", c.out_dir));
  return f;
}

void check_prob(std::vector<std::string>& out, const std::string& key, double v) {
  if (!(v >= 0.0 && v <= 1.0)) out.push_back(key + " must be in [0, 1], got " + std::to_string(v));
}

void check_positive(std::vector<std::string>& out, const std::string& key, double v) {
  if (!(v > 0.0) || !std::isfinite(v))
    out.push_back(key + " must be positive, got " + std::to_string(v));
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join(problems)), problems_(std::move(problems)) {}

RunConfig::RunConfig() = default;

std::vector<std::string> RunConfig::keys() {
  RunConfig c;
  std::vector<std::string> out;
  for (const auto& f : fields(c)) out.push_back(f.key);
  return out;
}

void RunConfig::apply_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError({std::string("config is not valid JSON: ") + e.what()});
  }
  if (!j.is_object()) throw ConfigError({"config must be a JSON object of dotted keys"});
  auto table = fields(*this);
  std::vector<std::string> problems;
  for (const auto& [key, value] : j.items()) {
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) {
      problems.push_back("unknown key '" + key + "'");
      continue;
    }
    if (auto err = it->set(value); !err.empty()) problems.push_back(err);
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot read config file " + path.string()});
  std::stringstream ss;
  ss << in.rdbuf();
  apply_json(ss.str());
}

void RunConfig::set(const std::string& key, const std::string& value) {
  json v;
  try {
    v = json::parse(value);
  } catch (const json::parse_error&) {
    v = value;
  }
  json obj = json::object();
  obj[key] = v;
  apply_json(obj.dump());
}

std::string RunConfig::to_json() const {
  json j = json::object();
  for (const auto& f : fields(const_cast<RunConfig&>(*this))) j[f.key] = f.get();
  return j.dump(2);
}

std::vector<std::string> RunConfig::problems() const {
  std::vector<std::string> out;
  const auto& m = model;
  if (m.image_size == 0 || m.patch == 0 || m.image_size % m.patch != 0)
    out.push_back("model.image_size must be a positive multiple of model.patch");
  else if (auto g = m.image_size / m.patch; g == 0 || (g & (g - 1)) != 0)
    out.push_back("model.image_size / model.patch must be a power of two");
  for (auto [key, v] : {std::pair{"model.d", m.d}, {"model.d_s", m.d_s}, {"model.d_u", m.d_u},
                        {"model.attn_heads", m.attn_heads}, {"model.seg_channels", m.seg_channels},
                        {"model.stem_channels", m.stem_channels}})
    if (v == 0) out.push_back(std::string(key) + " must be positive");
  if (m.attn_heads != 0 && m.d % m.attn_heads != 0)
    out.push_back("model.d must be divisible by model.attn_heads");
  if (m.l_max < 2) out.push_back("model.l_max must be at least 2");
  if (m.ground_kernel % 2 == 0) out.push_back("model.ground_kernel must be odd");

  check_positive(out, "sss.a", sss.a);
  check_positive(out, "sss.lambda", sss.lambda);
  if (!std::isfinite(sss.b)) out.push_back("sss.b must be finite");
  if (!(tau_init >= 0.01 && tau_init <= 100.0))
    out.push_back("contrastive.tau_init must be in [0.01, 100], got " + std::to_string(tau_init));

  if (pretrain.batch_size < 2) out.push_back("pretrain.batch_size must be at least 2");
  check_positive(out, "pretrain.lr", pretrain.adam.lr);
  if (!(pretrain.w_tg >= 0.0)) out.push_back("pretrain.w_tg must be >= 0");
  if (!(pretrain.view_noise >= 0.0)) out.push_back("pretrain.view_noise must be >= 0");
  check_prob(out, "pretrain.brightness", pretrain.augment.brightness);
  check_prob(out, "pretrain.synonym_prob", pretrain.augment.synonym_prob);

  if (semi.max_epochs == 0) out.push_back("semi.epochs must be positive");
  if (semi.batch_labeled == 0) out.push_back("semi.batch_labeled must be positive");
  if (semi.batch_unlabeled < 2) out.push_back("semi.batch_unlabeled must be at least 2");
  check_positive(out, "semi.lr", semi.adam.lr);
  check_prob(out, "semi.alpha", semi.alpha);
  if (!(semi.w_semi >= 0.0)) out.push_back("semi.w_semi must be >= 0");
  if (!(semi.w_tg >= 0.0)) out.push_back("semi.w_tg must be >= 0");
  if (semi.labeled_frac != 0.25 && semi.labeled_frac != 0.5 && semi.labeled_frac != 1.0)
    out.push_back("semi.labeled_frac must be one of 0.25, 0.5, 1.0, got " +
                  std::to_string(semi.labeled_frac));
  if (!(semi.student_noise >= 0.0)) out.push_back("semi.student_noise must be >= 0");
  check_prob(out, "augment.flip_prob", semi.augment.flip_prob);
  check_prob(out, "augment.rotate_prob", semi.augment.rotate_prob);
  check_prob(out, "augment.brightness", semi.augment.brightness);
  check_prob(out, "augment.synonym_prob", semi.augment.synonym_prob);
  return out;
}

void RunConfig::validate() const {
  if (auto p = problems(); !p.empty()) throw ConfigError(std::move(p));
}

PretrainOptions RunConfig::pretrain_options() const {
  PretrainOptions o = pretrain;
  o.sss = sss;
  o.sss_enabled = sss_enabled;
  o.imc_enabled = imc;
  o.seed = seed;
  return o;
}

SemiOptions RunConfig::semi_options() const {
  SemiOptions o = semi;
  o.seed = seed;
  return o;
}

}  // namespace dusss

#include "dusss/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>

#include "json.hpp"

namespace dusss {

namespace {

constexpr const char* kFormat = "dusss-checkpoint-v1";

std::filesystem::path with_ext(std::filesystem::path p, const char* ext) {
  if (p.extension() == ".json" || p.extension() == ".bin") p.replace_extension();
  p += ext;
  return p;
}

}  // namespace

std::filesystem::path manifest_path(const std::filesystem::path& stem) {
  return with_ext(stem, ".json");
}

std::filesystem::path blob_path(const std::filesystem::path& stem) {
  return with_ext(stem, ".bin");
}

void save_checkpoint(const std::filesystem::path& stem, const NamedTensors& tensors) {
  nlohmann::ordered_json manifest;
  manifest["format"] = kFormat;
  manifest["tensors"] = nlohmann::ordered_json::array();
  std::vector<char> bytes;
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
    }
    offset += t.numel();
  }
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream js(manifest_path(stem));
  if (!js) throw std::runtime_error("cannot write " + manifest_path(stem).string());
  js << manifest.dump(1) << '\n';
  std::ofstream bin(blob_path(stem), std::ios::binary);
  if (!bin) throw std::runtime_error("cannot write " + blob_path(stem).string());
  bin.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

NamedTensors load_checkpoint(const std::filesystem::path& stem) {
  std::ifstream js(manifest_path(stem));
  if (!js) throw std::runtime_error("cannot read checkpoint manifest " + manifest_path(stem).string());
  nlohmann::json manifest;
  try {
    js >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint manifest: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != kFormat)
    throw std::runtime_error("unsupported checkpoint format in " + manifest_path(stem).string());

  std::ifstream bin(blob_path(stem), std::ios::binary);
  if (!bin) throw std::runtime_error("cannot read checkpoint data " + blob_path(stem).string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)),
                                   std::istreambuf_iterator<char>());
  NamedTensors out;
  for (const auto& entry : manifest.at("tensors")) {
    const auto shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = numel_of(shape);
    if ((offset + n) * 4 > bytes.size())
      throw std::runtime_error("checkpoint data truncated at tensor " +
                               entry.at("name").get<std::string>());
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b)
        bits |= static_cast<std::uint32_t>(bytes[(offset + i) * 4 + static_cast<std::size_t>(b)])
                << (8 * b);
      values[i] = static_cast<double>(std::bit_cast<float>(bits));
    }
    out.emplace_back(entry.at("name").get<std::string>(), Tensor::from(shape, std::move(values)));
  }
  return out;
}

void assign_checkpoint(const NamedTensors& loaded, const NamedTensors& into,
                       const std::string& prefix) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : loaded) by_name[name] = &t;
  for (const auto& [name, dst] : into) {
    auto it = by_name.find(prefix + name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint lacks tensor " + prefix + name);
    if (it->second->shape() != dst.shape())
      throw std::runtime_error("checkpoint tensor " + prefix + name + " has shape " +
                               shape_str(it->second->shape()) + ", expected " +
                               shape_str(dst.shape()));
    Tensor target = dst;
    auto values = target.mutable_data();
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), values.begin());
  }
}

void round_to_float(const NamedTensors& tensors) {
  for (const auto& [name, t] : tensors) {
    Tensor target = t;
    for (double& v : target.mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace dusss

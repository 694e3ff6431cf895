#include "dusss/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace dusss {

namespace fs = std::filesystem;

namespace {

const char* kRegionPhrases[] = {"upper left", "upper right", "lower left", "lower right", "center"};
const char* kCountWords[] = {"one", "two", "three"};

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> words;
  for (std::string w; is >> w;) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    words.push_back(w);
  }
  return words;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

// Representative continuous point for a region in an S x S image.
std::pair<double, double> region_point(Region r, double s) {
  switch (r) {
    case Region::UpperLeft: return {0.25 * s, 0.25 * s};
    case Region::UpperRight: return {0.75 * s, 0.25 * s};
    case Region::LowerLeft: return {0.25 * s, 0.75 * s};
    case Region::LowerRight: return {0.75 * s, 0.75 * s};
    case Region::Center: return {0.5 * s, 0.5 * s};
  }
  return {0.5 * s, 0.5 * s};
}

Region classify_point(double cx, double cy, double s) {
  const double half = 0.5 * s, box = s / 8.0;
  if (std::abs(cx - half) < box && std::abs(cy - half) < box) return Region::Center;
  const bool left = cx < half, upper = cy < half;
  if (upper) return left ? Region::UpperLeft : Region::UpperRight;
  return left ? Region::LowerLeft : Region::LowerRight;
}

// Clockwise quarter turn of a continuous point in an S x S frame.
std::pair<double, double> rotate_point(double x, double y, double s) { return {s - y, x}; }

std::optional<std::pair<double, double>> centroid(const GrayImage& mask) {
  double sx = 0, sy = 0, n = 0;
  for (std::size_t y = 0; y < mask.height; ++y)
    for (std::size_t x = 0; x < mask.width; ++x)
      if (mask.at(y, x) >= 0.5) {
        sx += static_cast<double>(x) + 0.5;
        sy += static_cast<double>(y) + 0.5;
        n += 1;
      }
  if (n == 0) return std::nullopt;
  return std::make_pair(sx / n, sy / n);
}

struct Ellipse {
  double cx, cy, rx, ry, angle;
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
    return u * u + v * v <= 1.0;
  }
};

double quantize(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

}  // namespace

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::Labeled: return "labeled";
    case SplitTag::Unlabeled: return "unlabeled";
    case SplitTag::Val: return "val";
    case SplitTag::Test: return "test";
  }
  return "labeled";
}

SplitTag parse_split(const std::string& s) {
  if (s == "labeled") return SplitTag::Labeled;
  if (s == "unlabeled") return SplitTag::Unlabeled;
  if (s == "val") return SplitTag::Val;
  if (s == "test") return SplitTag::Test;
  throw std::invalid_argument("unknown split tag '" + s + "'");
}

Vocabulary Vocabulary::synthetic() {
  return from_tokens({"[PAD]", "[CLS]", "[UNK]", "one",   "two",    "three", "small",
                      "large", "lesion", "lesions", "region", "area", "upper", "lower",
                      "left",  "right", "center", "in",    "at",     "the"});
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < 3 || tokens[kPad] != "[PAD]" || tokens[kCls] != "[CLS]" ||
      tokens[kUnk] != "[UNK]")
    throw std::invalid_argument("vocabulary must start with [PAD], [CLS], [UNK]");
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i)
    if (!v.index_.emplace(v.tokens_[i], i).second)
      throw std::invalid_argument("duplicate vocabulary token '" + v.tokens_[i] + "'");
  return v;
}

Vocabulary Vocabulary::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
  nlohmann::json j;
  in >> j;
  return from_tokens(j.at("tokens").get<std::vector<std::string>>());
}

void Vocabulary::save(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  out << nlohmann::json{{"tokens", tokens_}}.dump(1) << '\n';
}

std::size_t Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

std::vector<std::size_t> tokenize(const std::string& text, const Vocabulary& vocab,
                                  std::size_t l_max) {
  std::vector<std::size_t> ids(l_max, Vocabulary::kPad);
  ids[0] = Vocabulary::kCls;
  const auto words = split_words(text);
  for (std::size_t i = 0; i < words.size() && i + 1 < l_max; ++i) ids[i + 1] = vocab.id(words[i]);
  return ids;
}

TokenBatch make_token_batch(const std::vector<const std::string*>& texts, const Vocabulary& vocab,
                            std::size_t l_max) {
  TokenBatch tb;
  tb.batch = texts.size();
  tb.length = l_max;
  for (const auto* t : texts) {
    auto ids = tokenize(*t, vocab, l_max);
    tb.ids.insert(tb.ids.end(), ids.begin(), ids.end());
  }
  return tb;
}

std::string region_phrase(Region r) { return kRegionPhrases[static_cast<int>(r)]; }

std::optional<Region> mask_region(const GrayImage& mask) {
  auto c = centroid(mask);
  if (!c) return std::nullopt;
  return classify_point(c->first, c->second, static_cast<double>(mask.width));
}

double region_margin(const GrayImage& mask) {
  auto c = centroid(mask);
  if (!c) return 0.0;
  const double s = static_cast<double>(mask.width), half = 0.5 * s, box = s / 8.0;
  const double dx = std::abs(c->first - half), dy = std::abs(c->second - half);
  if (dx < box && dy < box) return std::min(box - dx, box - dy);
  // Outside the centre box: distance to the box and to both midlines.
  double margin = std::min(dx, dy);
  const double ox = std::max(0.0, dx - box), oy = std::max(0.0, dy - box);
  return std::min(margin, std::max(ox, oy));
}

std::optional<Region> caption_region(const std::string& caption) {
  const std::string padded = " " + join_words(split_words(caption)) + " ";
  for (int r = 0; r < 5; ++r)
    if (padded.find(" " + std::string(kRegionPhrases[r]) + " ") != std::string::npos)
      return static_cast<Region>(r);
  return std::nullopt;
}

SyntheticSample make_synthetic_sample(Rng& rng, std::size_t size) {
  const double s = static_cast<double>(size), unit = s / 32.0;
  for (;;) {
    SyntheticSample out;
    out.count = 1 + uniform_index(rng, 3);
    out.large = bernoulli(rng, 0.5);
    out.region = static_cast<Region>(uniform_index(rng, 5));
    const auto [ax, ay] = region_point(out.region, s);
    const double spread = (out.count == 1 ? 2.0 : 4.0) * unit;

    bool placed = false;
    std::vector<Ellipse> blobs;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      blobs.clear();
      bool ok = true;
      for (std::size_t k = 0; k < out.count && ok; ++k) {
        const double r = (out.large ? uniform(rng, 3.6, 4.6) : uniform(rng, 2.6, 3.2)) * unit;
        Ellipse e{ax + uniform(rng, -spread, spread), ay + uniform(rng, -spread, spread),
                  r * uniform(rng, 0.8, 1.2), r * uniform(rng, 0.8, 1.2),
                  uniform(rng, 0.0, 3.14159265358979)};
        if (e.cx - e.rx < 1 || e.cy - e.ry < 1 || e.cx + e.rx > s - 1 || e.cy + e.ry > s - 1)
          ok = false;
        for (const auto& o : blobs)
          if (std::hypot(o.cx - e.cx, o.cy - e.cy) < std::max(o.rx, o.ry) + std::max(e.rx, e.ry) + unit)
            ok = false;
        blobs.push_back(e);
      }
      if (!ok) continue;
      out.mask = GrayImage(size, size);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          for (const auto& e : blobs)
            if (e.contains(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5))
              out.mask.at(y, x) = 1.0;
      double fg = 0;
      for (double v : out.mask.pixels) fg += v;
      fg /= s * s;
      placed = fg >= 0.02 && fg <= 0.40 && mask_region(out.mask) == out.region &&
               region_margin(out.mask) >= 0.5;
    }
    if (!placed) continue;

    // Textured background: low-frequency waves plus pixel noise.
    out.image = GrayImage(size, size);
    const double base = uniform(rng, 0.15, 0.35);
    double fx[3], fy[3], ph[3], amp[3];
    for (int k = 0; k < 3; ++k) {
      fx[k] = uniform(rng, 0.5, 3.0) * 6.283185307 / s;
      fy[k] = uniform(rng, 0.5, 3.0) * 6.283185307 / s;
      ph[k] = uniform(rng, 0.0, 6.283185307);
      amp[k] = uniform(rng, 0.02, 0.06);
    }
    const double contrast = uniform(rng, 0.25, 0.45);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        double v = base;
        for (int k = 0; k < 3; ++k)
          v += amp[k] * std::sin(fx[k] * static_cast<double>(x) + fy[k] * static_cast<double>(y) + ph[k]);
        v += 0.04 * normal(rng);
        if (out.mask.at(y, x) > 0.5) v += contrast;
        out.image.at(y, x) = quantize(v);
      }

    out.caption = std::string(kCountWords[out.count - 1]) + " " + (out.large ? "large" : "small") +
                  " " + (out.count == 1 ? "lesion" : "lesions") + " in " +
                  region_phrase(out.region) + " region";
    return out;
  }
}

void gen_synthetic(const GenOptions& options, const fs::path& out_dir) {
  if (options.count < 8) throw std::invalid_argument("gen_synthetic: count must be >= 8");
  if (options.size < 8 || options.size % 2 != 0)
    throw std::invalid_argument("gen_synthetic: size must be an even number >= 8");
  if (options.val_frac < 0 || options.test_frac < 0 || options.val_frac + options.test_frac >= 1)
    throw std::invalid_argument("gen_synthetic: val_frac + test_frac must be in [0, 1)");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec) throw std::runtime_error("cannot create dataset directory " + out_dir.string());

  const auto n = options.count;
  const auto n_val = static_cast<std::size_t>(std::floor(options.val_frac * static_cast<double>(n)));
  const auto n_test = static_cast<std::size_t>(std::floor(options.test_frac * static_cast<double>(n)));
  const std::size_t n_train = n - n_val - n_test;

  Rng rng = make_rng(options.seed, "gen_synthetic");
  std::ofstream manifest(out_dir / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("cannot write " + (out_dir / "manifest.jsonl").string());
  for (std::size_t i = 0; i < n; ++i) {
    const auto smp = make_synthetic_sample(rng, options.size);
    char id[32];
    std::snprintf(id, sizeof id, "s%05zu", i);
    const std::string img_rel = std::string("images/") + id + ".pgm";
    const std::string mask_rel = std::string("masks/") + id + ".pgm";
    save_pgm(smp.image, out_dir / img_rel);
    save_pgm(smp.mask, out_dir / mask_rel);
    const SplitTag tag = i < n_train           ? SplitTag::Labeled
                         : i < n_train + n_val ? SplitTag::Val
                                               : SplitTag::Test;
    nlohmann::ordered_json line{{"id", id}, {"image", img_rel}, {"mask", mask_rel},
                                {"text", smp.caption}, {"split", to_string(tag)}};
    manifest << line.dump() << '\n';
  }
  Vocabulary::synthetic().save(out_dir / "vocab.json");
}

GrayImage load_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open PGM " + path.string());
  auto next_token = [&]() {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {
        while ((c = in.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
    return tok;
  };
  if (next_token() != "P5") throw std::runtime_error("not a binary PGM (P5): " + path.string());
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token());
    h = std::stoul(next_token());
    maxval = std::stoul(next_token());
  } catch (const std::exception&) {
    throw std::runtime_error("malformed PGM header in " + path.string());
  }
  if (w == 0 || h == 0) throw std::runtime_error("malformed PGM header in " + path.string());
  if (maxval != 255)
    throw std::runtime_error("unsupported PGM maxval " + std::to_string(maxval) + " in " +
                             path.string() + " (only 255 is accepted)");
  std::vector<unsigned char> bytes(w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size())
    throw std::runtime_error("truncated PGM payload in " + path.string());
  GrayImage img(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = bytes[i] / 255.0;
  return img;
}

void save_pgm(const GrayImage& image, const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write PGM " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<unsigned char> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(image.pixels[i], 0.0, 1.0) * 255.0));
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

GrayImage binarize(const GrayImage& mask) {
  GrayImage out = mask;
  for (double& v : out.pixels) v = v >= 0.5 ? 1.0 : 0.0;
  return out;
}

std::vector<Sample> load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read manifest " + path.string());
  const fs::path root = path.parent_path();
  std::vector<Sample> samples;
  std::set<std::string> ids;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
    Sample s;
    try {
      s.id = j.at("id").get<std::string>();
      s.text = j.at("text").get<std::string>();
      s.split = parse_split(j.at("split").get<std::string>());
      s.image = load_pgm(root / j.at("image").get<std::string>());
      const bool has_mask = j.contains("mask") && !j["mask"].is_null();
      if (s.split == SplitTag::Unlabeled && has_mask)
        throw std::runtime_error("unlabeled sample '" + s.id + "' carries a mask path");
      if (s.split != SplitTag::Unlabeled && !has_mask)
        throw std::runtime_error("sample '" + s.id + "' in split " + to_string(s.split) +
                                 " has no mask");
      if (has_mask) {
        s.mask = binarize(load_pgm(root / j["mask"].get<std::string>()));
        if (s.mask->height != s.image.height || s.mask->width != s.image.width)
          throw std::runtime_error("mask of '" + s.id + "' does not match image size");
      }
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    } catch (const std::exception& e) {
      throw std::runtime_error(where + ": " + e.what());
    }
    if (!ids.insert(s.id).second) throw std::runtime_error(where + ": duplicate id '" + s.id + "'");
    samples.push_back(std::move(s));
  }
  std::sort(samples.begin(), samples.end(),
            [](const Sample& a, const Sample& b) { return a.id < b.id; });
  return samples;
}

GrayImage flip_horizontal(const GrayImage& img) {
  GrayImage out(img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) out.at(y, x) = img.at(y, img.width - 1 - x);
  return out;
}

GrayImage rotate90(const GrayImage& img, int quarter_turns) {
  GrayImage cur = img;
  const int turns = ((quarter_turns % 4) + 4) % 4;
  for (int t = 0; t < turns; ++t) {
    if (cur.height != cur.width) throw std::invalid_argument("rotate90 needs a square image");
    const std::size_t s = cur.width;
    GrayImage next(s, s);
    // new[y'][x'] = old[S-1-x'][y']
    for (std::size_t y = 0; y < s; ++y)
      for (std::size_t x = 0; x < s; ++x) next.at(y, x) = cur.at(s - 1 - x, y);
    cur = std::move(next);
  }
  return cur;
}

std::string transform_caption(const std::string& caption, bool flip, int quarter_turns) {
  auto region = caption_region(caption);
  if (!region) return caption;
  const double s = 1.0;
  auto [x, y] = region_point(*region, s);
  if (flip) x = s - x;
  const int turns = ((quarter_turns % 4) + 4) % 4;
  for (int t = 0; t < turns; ++t) std::tie(x, y) = rotate_point(x, y, s);
  const std::string from = " " + region_phrase(*region) + " ";
  const std::string to = " " + region_phrase(classify_point(x, y, s)) + " ";
  std::string padded = " " + join_words(split_words(caption)) + " ";
  padded.replace(padded.find(from), from.size(), to);
  return padded.substr(1, padded.size() - 2);
}

std::string swap_synonyms(const std::string& caption, Rng& rng, double prob) {
  static const std::map<std::string, std::string> kSynonyms{
      {"region", "area"}, {"area", "region"}, {"in", "at"}, {"at", "in"}};
  auto words = split_words(caption);
  for (auto& w : words) {
    auto it = kSynonyms.find(w);
    if (it != kSynonyms.end() && bernoulli(rng, prob)) w = it->second;
  }
  return join_words(words);
}

Sample augment(const Sample& sample, const AugmentSpec& spec, Rng& rng) {
  Sample out = sample;
  const bool flip = bernoulli(rng, spec.flip_prob);
  const int turns = bernoulli(rng, spec.rotate_prob) ? 1 + static_cast<int>(uniform_index(rng, 3)) : 0;
  const double jitter = spec.brightness > 0 ? uniform(rng, -spec.brightness, spec.brightness) : 0.0;
  if (flip) {
    out.image = flip_horizontal(out.image);
    if (out.mask) out.mask = flip_horizontal(*out.mask);
  }
  if (turns) {
    out.image = rotate90(out.image, turns);
    if (out.mask) out.mask = rotate90(*out.mask, turns);
  }
  if (jitter != 0.0)
    for (double& v : out.image.pixels) v = std::clamp(v + jitter, 0.0, 1.0);
  if (flip || turns) out.text = transform_caption(out.text, flip, turns);
  if (spec.synonym_prob > 0) out.text = swap_synonyms(out.text, rng, spec.synonym_prob);
  return out;
}

LabeledSplit split_labeled(const std::vector<Sample>& train, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw std::invalid_argument("labeled fraction must be in (0, 1], got " + std::to_string(fraction));
  std::vector<const Sample*> masked;
  LabeledSplit out;
  for (const auto& s : train) {
    if (s.split == SplitTag::Val || s.split == SplitTag::Test)
      throw std::invalid_argument("split_labeled: sample '" + s.id + "' is not a training sample");
    if (s.mask)
      masked.push_back(&s);
    else
      out.unlabeled.push_back({s.id, s.image, s.text});
  }
  Rng rng = make_rng(seed, "split_labeled");
  shuffle(masked.begin(), masked.end(), rng);
  const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(masked.size()) - 1e-9));
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (i < keep) {
      out.labeled.push_back(*masked[i]);
      out.labeled.back().split = SplitTag::Labeled;
    } else {
      out.unlabeled.push_back({masked[i]->id, masked[i]->image, masked[i]->text});
    }
  }
  return out;
}

std::vector<Sample> select_split(const std::vector<Sample>& all, std::initializer_list<SplitTag> tags) {
  std::vector<Sample> out;
  for (const auto& s : all)
    if (std::find(tags.begin(), tags.end(), s.split) != tags.end()) out.push_back(s);
  return out;
}

}  // namespace dusss

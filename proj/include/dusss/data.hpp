#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dusss/models.hpp"
#include "dusss/rng.hpp"

namespace dusss {

// Grayscale raster, row-major, values in [0, 1].
struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<double> pixels;

  GrayImage() = default;
  GrayImage(std::size_t h, std::size_t w, double fill = 0.0)
      : height(h), width(w), pixels(h * w, fill) {}
  double& at(std::size_t y, std::size_t x) { return pixels[y * width + x]; }
  double at(std::size_t y, std::size_t x) const { return pixels[y * width + x]; }
  bool operator==(const GrayImage&) const = default;
};

enum class SplitTag { Labeled, Unlabeled, Val, Test };

std::string to_string(SplitTag tag);
SplitTag parse_split(const std::string& s);

struct Sample {
  std::string id;
  GrayImage image;
  std::optional<GrayImage> mask;  // present iff split is labeled, val or test
  std::string text;
  SplitTag split = SplitTag::Labeled;
};

// Training view of an unlabeled sample: there is no mask field to read.
struct UnlabeledSample {
  std::string id;
  GrayImage image;
  std::string text;
};

class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0, kCls = 1, kUnk = 2;

  // Closed vocabulary of the synthetic caption grammar.
  static Vocabulary synthetic();
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t id(const std::string& word) const;  // kUnk when absent
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Lowercases, splits on whitespace, prepends [CLS], pads to l_max; words past
// l_max - 1 are dropped.
std::vector<std::size_t> tokenize(const std::string& text, const Vocabulary& vocab,
                                  std::size_t l_max);
TokenBatch make_token_batch(const std::vector<const std::string*>& texts, const Vocabulary& vocab,
                            std::size_t l_max);

// Location of a lesion cluster in the image.
enum class Region { UpperLeft, UpperRight, LowerLeft, LowerRight, Center };

std::string region_phrase(Region r);
// Region of the foreground centroid (pixel centres at +0.5); nullopt for an
// empty mask. Centre box is |c - S/2| < S/8 on both axes.
std::optional<Region> mask_region(const GrayImage& mask);
// Distance of the centroid to the nearest region decision boundary.
double region_margin(const GrayImage& mask);
// The position phrase found in a caption, if any.
std::optional<Region> caption_region(const std::string& caption);

struct SyntheticSample {
  GrayImage image, mask;
  std::string caption;
  std::size_t count = 0;
  bool large = false;
  Region region = Region::Center;
};

SyntheticSample make_synthetic_sample(Rng& rng, std::size_t size);

struct GenOptions {
  std::size_t count = 256;
  std::uint64_t seed = 7;
  std::size_t size = 32;
  double val_frac = 0.125;
  double test_frac = 0.125;
};

// Writes manifest.jsonl, images/*.pgm, masks/*.pgm and vocab.json. Every
// non-val/test sample is tagged labeled; labeled/unlabeled partitioning
// happens at training time via split_labeled.
void gen_synthetic(const GenOptions& options, const std::filesystem::path& out_dir);

// Binary P5 with maxval 255. Saving quantizes to round(255 * v).
GrayImage load_pgm(const std::filesystem::path& path);
void save_pgm(const GrayImage& image, const std::filesystem::path& path);
GrayImage binarize(const GrayImage& mask);

// JSONL with {"id","image","mask"?,"text","split"} per line; paths are
// relative to the manifest directory. Sorted by id.
std::vector<Sample> load_manifest(const std::filesystem::path& path);

struct AugmentSpec {
  double flip_prob = 0.5;
  double rotate_prob = 0.5;      // then one of 90/180/270 uniformly
  double brightness = 0.1;       // additive jitter in [-b, b]
  double synonym_prob = 0.3;
};

GrayImage flip_horizontal(const GrayImage& img);
// Clockwise quarter turns.
GrayImage rotate90(const GrayImage& img, int quarter_turns);
// Rewrites the position phrase for the same geometric transform.
std::string transform_caption(const std::string& caption, bool flip, int quarter_turns);
std::string swap_synonyms(const std::string& caption, Rng& rng, double prob);

Sample augment(const Sample& sample, const AugmentSpec& spec, Rng& rng);

struct LabeledSplit {
  std::vector<Sample> labeled;
  std::vector<UnlabeledSample> unlabeled;
};

// Deterministic shuffle, then the first ceil(fraction * N) keep their masks.
LabeledSplit split_labeled(const std::vector<Sample>& train, double fraction, std::uint64_t seed);

std::vector<Sample> select_split(const std::vector<Sample>& all, std::initializer_list<SplitTag> tags);

}  // namespace dusss

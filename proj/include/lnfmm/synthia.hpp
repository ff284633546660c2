#pragma once
// Synthetic paired two-domain data with known shared and domain-specific
// structure.
//
// V domain: points in R² drawn from isotropic Gaussians whose centers sit on
// a circle. Each class owns a contiguous arc holding one center per style.
//
// T domain: fixed-length token sequences. A (class, phrasing) template puts
// two noun slots at a position pair unique to that template and fills the
// remaining positions with function words in a fixed order. Each noun slot
// independently takes one of the class's synonyms, so a template has
// n_synonyms² surface forms that share one canonical sequence.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace lnfmm::synthia {

struct GeneratorConfig {
  std::size_t n_classes = 4;
  std::size_t n_v_styles = 3;
  std::size_t n_t_phrasings = 3;
  std::size_t n_synonyms = 3;
  double sigma = 0.08;
  double radius = 2.0;
  std::size_t vocab = 16;
  std::size_t length = 6;
  std::size_t n_train = 2000;
  std::size_t n_test = 200;
  double pairing_fraction = 1.0;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

using Tokens = std::vector<std::size_t>;
using Point = std::array<double, 2>;

// Model-facing record.
struct Record {
  Point x_v{};
  Tokens x_t;
  bool paired = false;
};

// Evaluation-only generating factors of a record. For unpaired records the
// token sequence comes from an independently drawn class `t_class`.
struct Truth {
  std::size_t v_class = 0;
  std::size_t v_style = 0;
  std::size_t t_class = 0;
  std::size_t t_phrasing = 0;
};

struct Split {
  std::vector<Record> records;
  std::vector<Truth> truth;
  std::size_t size() const { return records.size(); }
};

struct Dataset {
  Split train;
  Split test;
};

struct TruthModes {
  std::vector<Point> centers;  // one per style
  std::vector<Tokens> phrasings;  // canonical sequence per phrasing
};

struct TokenClass {
  std::size_t cls = 0;
  std::size_t phrasing = 0;
  std::size_t distance = 0;  // Hamming distance of the canonical form
  bool unambiguous = false;  // strictly closer than the runner-up
};

class Generator {
 public:
  explicit Generator(GeneratorConfig config);

  const GeneratorConfig& config() const { return config_; }

  Point center(std::size_t cls, std::size_t style) const;
  Tokens canonical_template(std::size_t cls, std::size_t phrasing) const;
  // Surface form with the given synonym index per noun slot.
  Tokens realize(std::size_t cls, std::size_t phrasing, std::size_t syn_a, std::size_t syn_b) const;
  TruthModes truth_modes(std::size_t cls) const;

  // Every noun replaced by its class's first synonym.
  Tokens canonicalize(const Tokens& seq) const;
  // Nearest canonical template over all classes.
  TokenClass classify_tokens(const Tokens& seq) const;
  // Nearest center: (class, style).
  std::pair<std::size_t, std::size_t> classify_point(const Point& x) const;

  Dataset generate() const;

 private:
  void check_class(std::size_t cls) const;

  GeneratorConfig config_;
  std::vector<std::array<std::size_t, 2>> slots_;  // noun positions per (class, phrasing)
};

// Line-delimited JSON. The first line of every file is a header object.
void write_records(const std::string& path, const Split& split, const std::string& header_json);
void write_truth(const std::string& path, const Dataset& data, const std::string& header_json);
Split read_records(const std::string& path);
// Fills the truth of both splits from a truth file.
void read_truth(const std::string& path, Dataset& data);

}  // namespace lnfmm::synthia

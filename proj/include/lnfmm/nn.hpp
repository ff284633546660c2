#pragma once
// Small differentiable building blocks: affine maps, tanh MLPs, a gated
// recurrent cell and a token embedding table.

#include <string>
#include <vector>

#include "lnfmm/autodiff.hpp"
#include "lnfmm/optim.hpp"
#include "lnfmm/rng.hpp"

namespace lnfmm::nn {

enum class Init { kXavier, kZero };

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, const std::string& group,
         std::size_t in, std::size_t out, Rng& rng, Init init = Init::kXavier);

  ad::Var operator()(const ad::Var& x) const;

  std::size_t in_features() const { return weight_.rows(); }
  std::size_t out_features() const { return weight_.cols(); }
  const ad::Var& weight() const { return weight_; }
  const ad::Var& bias() const { return bias_; }

 private:
  ad::Var weight_;  // (in × out)
  ad::Var bias_;    // (1 × out)
};

// tanh between layers, identity on the output.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterStore& store, const std::string& name, const std::string& group,
      const std::vector<std::size_t>& sizes, Rng& rng, bool zero_last = false);

  ad::Var operator()(const ad::Var& x) const;

  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
};

class GruCell {
 public:
  GruCell() = default;
  GruCell(ParameterStore& store, const std::string& name, const std::string& group,
          std::size_t input, std::size_t hidden, Rng& rng);

  // h' = (1 - u) ⊙ n + u ⊙ h with update gate u, reset gate r and candidate
  // n = tanh(x W_n + (r ⊙ h) U_n + b_n).
  ad::Var operator()(const ad::Var& x, const ad::Var& h) const;

  std::size_t hidden_size() const { return hidden_; }

 private:
  std::size_t hidden_ = 0;
  Linear input_gates_;   // x -> [u | r | n]
  Linear hidden_gates_;  // h -> [u | r], no candidate part
  Linear hidden_cand_;   // (r ⊙ h) -> n
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(ParameterStore& store, const std::string& name, const std::string& group,
            std::size_t count, std::size_t dim, Rng& rng);

  ad::Var operator()(std::span<const std::size_t> ids) const;
  std::size_t count() const { return table_.rows(); }

 private:
  ad::Var table_;
};

}  // namespace lnfmm::nn

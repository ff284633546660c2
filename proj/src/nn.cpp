#include "lnfmm/nn.hpp"

#include <cmath>

#include "lnfmm/errors.hpp"

namespace lnfmm::nn {

Linear::Linear(ParameterStore& store, const std::string& name, const std::string& group,
               std::size_t in, std::size_t out, Rng& rng, Init init) {
  Matrix w(in, out);
  if (init == Init::kXavier) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (double& v : w.data()) v = bound * (2.0 * rng.uniform() - 1.0);
  }
  weight_ = store.add(name + ".weight", group, std::move(w));
  bias_ = store.add(name + ".bias", group, Matrix(1, out));
}

ad::Var Linear::operator()(const ad::Var& x) const {
  if (x.cols() != weight_.rows()) {
    throw DimensionError("Linear", x.shape().str(), weight_.shape().str());
  }
  return ad::matmul(x, weight_) + bias_;
}

Mlp::Mlp(ParameterStore& store, const std::string& name, const std::string& group,
         const std::vector<std::size_t>& sizes, Rng& rng, bool zero_last) {
  if (sizes.size() < 2) throw ContractError("Mlp needs at least input and output sizes");
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const bool last = i + 2 == sizes.size();
    layers_.emplace_back(store, name + "." + std::to_string(i), group, sizes[i], sizes[i + 1], rng,
                         last && zero_last ? Init::kZero : Init::kXavier);
  }
}

ad::Var Mlp::operator()(const ad::Var& x) const {
  ad::Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i](h);
    if (i + 1 < layers_.size()) h = ad::tanh(h);
  }
  return h;
}

GruCell::GruCell(ParameterStore& store, const std::string& name, const std::string& group,
                 std::size_t input, std::size_t hidden, Rng& rng)
    : hidden_(hidden),
      input_gates_(store, name + ".input", group, input, 3 * hidden, rng),
      hidden_gates_(store, name + ".hidden", group, hidden, 2 * hidden, rng),
      hidden_cand_(store, name + ".candidate", group, hidden, hidden, rng) {}

ad::Var GruCell::operator()(const ad::Var& x, const ad::Var& h) const {
  const ad::Var xi = input_gates_(x);
  const ad::Var hh = ad::matmul(h, hidden_gates_.weight()) + hidden_gates_.bias();
  const ad::Var u = ad::sigmoid(ad::slice_cols(xi, 0, hidden_) + ad::slice_cols(hh, 0, hidden_));
  const ad::Var r = ad::sigmoid(ad::slice_cols(xi, hidden_, hidden_) + ad::slice_cols(hh, hidden_, hidden_));
  const ad::Var n = ad::tanh(ad::slice_cols(xi, 2 * hidden_, hidden_) + hidden_cand_(r * h));
  return n + u * (h - n);
}

Embedding::Embedding(ParameterStore& store, const std::string& name, const std::string& group,
                     std::size_t count, std::size_t dim, Rng& rng) {
  table_ = store.add(name + ".table", group, rng.normal_matrix(count, dim, 0.5));
}

ad::Var Embedding::operator()(std::span<const std::size_t> ids) const {
  for (std::size_t id : ids) {
    if (id >= table_.rows()) {
      throw DimensionError("Embedding", table_.shape().str(), "id " + std::to_string(id));
    }
  }
  return ad::gather_rows(table_, ids);
}

}  // namespace lnfmm::nn

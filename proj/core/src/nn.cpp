#include "cradle/nn.hpp"

#include <cmath>

#include "cradle/errors.hpp"

namespace cradle {

void MlpSpec::validate() const {
  if (widths.empty()) throw ConfigError("MlpSpec: needs at least the input width");
  for (int w : widths)
    if (w <= 0) throw ConfigError("MlpSpec: nonpositive layer width");
  for (const auto& h : heads) {
    if (h.width <= 0) throw ConfigError("MlpSpec: nonpositive head width");
    if (h.transform == HeadTransform::softmax && h.width < 2)
      throw ConfigError("MlpSpec: softmax head '" + h.name + "' needs width >= 2");
  }
}

Var& ParamStore::add(const std::string& name, Array init) {
  if (index_.count(name)) throw ConfigError("ParamStore: duplicate parameter '" + name + "'");
  index_[name] = items_.size();
  items_.emplace_back(name, Var::param(std::move(init), name));
  return items_.back().second;
}

Var& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
  return items_[it->second].second;
}

const Var& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("ParamStore: unknown parameter '" + name + "'");
  return items_[it->second].second;
}

bool ParamStore::contains(const std::string& name) const { return index_.count(name) > 0; }

namespace {

Array fan_in_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  Array w(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) w(i, j) = (2.0 * rng.uniform() - 1.0) * bound;
  return w;
}

}  // namespace

void mlp_init(const MlpSpec& spec, const std::string& prefix, ParamStore& store, Rng& rng) {
  spec.validate();
  for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
    const auto tag = prefix + "/W" + std::to_string(l);
    store.add(tag, fan_in_uniform(spec.widths[l], spec.widths[l + 1], rng));
    store.add(prefix + "/b" + std::to_string(l), Array::Zero(1, spec.widths[l + 1]));
  }
  const int trunk_out = spec.trunk_output_width();
  for (const auto& h : spec.heads) {
    store.add(prefix + "/" + h.name + ".W", fan_in_uniform(trunk_out, h.width, rng));
    store.add(prefix + "/" + h.name + ".b", Array::Zero(1, h.width));
  }
}

std::map<std::string, Var> mlp_forward(const MlpSpec& spec, const std::string& prefix,
                                       const ParamStore& store, const Var& input) {
  if (input.cols() != spec.input_width())
    throw NumericError("mlp_forward: input width " + std::to_string(input.cols()) + " != " +
                       std::to_string(spec.input_width()));
  Var h = input;
  for (std::size_t l = 0; l + 1 < spec.widths.size(); ++l) {
    const auto& W = store.get(prefix + "/W" + std::to_string(l));
    const auto& b = store.get(prefix + "/b" + std::to_string(l));
    h = matmul(h, W) + b;
    h = spec.activation == Activation::relu ? relu(h) : softplus(h);
  }
  std::map<std::string, Var> out;
  if (spec.heads.empty()) {
    out["out"] = h;
    return out;
  }
  for (const auto& head : spec.heads) {
    const auto& W = store.get(prefix + "/" + head.name + ".W");
    const auto& b = store.get(prefix + "/" + head.name + ".b");
    Var y = matmul(h, W) + b;
    switch (head.transform) {
      case HeadTransform::identity: break;
      case HeadTransform::softplus: y = softplus(y); break;
      case HeadTransform::softmax: y = softmax_rows(y); break;
    }
    out[head.name] = y;
  }
  return out;
}

Adam::Adam(const ParamStore& params, AdamConfig cfg) : cfg_(cfg) {
  for (const auto& [name, p] : params.items()) {
    (void)name;
    m_.push_back(Array::Zero(p.rows(), p.cols()));
    v_.push_back(Array::Zero(p.rows(), p.cols()));
  }
}

void Adam::step(ParamStore& params) {
  auto& items = params.items();
  if (items.size() != m_.size()) throw NumericError("Adam: parameter count changed");

  double sq_norm = 0.0;
  for (auto& [name, p] : items) {
    const Array& g = p.grad();
    if (g.size() != p.value().size())
      throw NumericError("Adam: missing gradient for '" + name + "'");
    if (!g.isFinite().all()) throw NumericError("Adam: non-finite gradient in '" + name + "'");
    sq_norm += (g * g).sum();
  }
  const double norm = std::sqrt(sq_norm);
  const double scale = (norm > cfg_.clip_norm && norm > 0.0) ? cfg_.clip_norm / norm : 1.0;

  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t k = 0; k < items.size(); ++k) {
    Array g = items[k].second.grad() * scale;
    m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * g;
    v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * g * g;
    const Array mhat = m_[k] / bc1;
    const Array vhat = v_[k] / bc2;
    items[k].second.set_value(items[k].second.value() -
                              cfg_.lr * mhat / (vhat.sqrt() + cfg_.eps));
  }
}

void Adam::restore(std::int64_t step, std::vector<Array> m, std::vector<Array> v) {
  if (m.size() != m_.size() || v.size() != v_.size())
    throw NumericError("Adam: restore with mismatched moment count");
  step_ = step;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace cradle

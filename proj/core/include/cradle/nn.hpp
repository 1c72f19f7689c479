#pragma once

#include <map>
#include <string>
#include <vector>

#include "cradle/rng.hpp"
#include "cradle/tensor.hpp"

namespace cradle {

enum class Activation { relu, softplus };
enum class HeadTransform { identity, softplus, softmax };

struct HeadSpec {
  std::string name;
  int width = 0;
  HeadTransform transform = HeadTransform::identity;
};

/// Feed-forward trunk plus named output heads. widths[0] is the input width;
/// widths[1..] are hidden layers. Each head is a linear layer off the trunk
/// output followed by its transform. With no heads the trunk output itself is
/// returned under the name "out".
struct MlpSpec {
  std::vector<int> widths;
  Activation activation = Activation::relu;
  std::vector<HeadSpec> heads;

  int input_width() const { return widths.empty() ? 0 : widths.front(); }
  int trunk_output_width() const { return widths.empty() ? 0 : widths.back(); }
  void validate() const;
};

/// Ordered collection of named learnable leaves. Order is fixed at insertion
/// and defines checkpoint layout and optimizer traversal.
class ParamStore {
 public:
  Var& add(const std::string& name, Array init);
  Var& get(const std::string& name);
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<std::pair<std::string, Var>>& items() { return items_; }
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }

 private:
  std::vector<std::pair<std::string, Var>> items_;
  std::map<std::string, std::size_t> index_;
};

/// Creates trunk and head parameters under "<prefix>/..." with uniform
/// fan-in initialization U(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases zero.
void mlp_init(const MlpSpec& spec, const std::string& prefix, ParamStore& store, Rng& rng);

/// Deterministic forward pass; returns one tensor per head.
std::map<std::string, Var> mlp_forward(const MlpSpec& spec, const std::string& prefix,
                                       const ParamStore& store, const Var& input);

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 100.0;  // global L2 clip applied before the update
};

class Adam {
 public:
  Adam(const ParamStore& params, AdamConfig cfg);

  /// Clips the global gradient norm, then applies one bias-corrected step.
  /// Gradients are read from each leaf's grad(); throws NumericError naming
  /// the parameter if a gradient is non-finite.
  void step(ParamStore& params);

  std::int64_t step_count() const { return step_; }

  // Moment access for checkpointing.
  const std::vector<Array>& first_moments() const { return m_; }
  const std::vector<Array>& second_moments() const { return v_; }
  void restore(std::int64_t step, std::vector<Array> m, std::vector<Array> v);
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<Array> m_, v_;
};

}  // namespace cradle

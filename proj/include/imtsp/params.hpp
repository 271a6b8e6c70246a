#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "imtsp/rng.hpp"
#include "imtsp/tensor.hpp"

namespace imtsp {

enum class ParamRole { policy, surrogate };

inline const char* to_string(ParamRole r) { return r == ParamRole::policy ? "policy" : "surrogate"; }

/// Names, shapes and flat offsets of a ParamStore, in insertion order.
struct ParamLayout {
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;

  friend bool operator==(const ParamLayout&, const ParamLayout&) = default;
};

/// One gradient draw, flattened in the order of the layout it refers to.
struct GradientSample {
  std::vector<double> values;
  std::shared_ptr<const ParamLayout> layout;

  GradientSample() = default;
  explicit GradientSample(std::shared_ptr<const ParamLayout> l)
      : values(l ? l->total : 0, 0.0), layout(std::move(l)) {}

  std::size_t size() const { return values.size(); }

  GradientSample& operator+=(const GradientSample& o) {
    check_compatible(o, "GradientSample::operator+=");
    for (std::size_t i = 0; i < values.size(); ++i) values[i] += o.values[i];
    return *this;
  }
  GradientSample& operator*=(double s) {
    for (double& v : values) v *= s;
    return *this;
  }
  friend GradientSample operator*(double s, GradientSample g) { return g *= s; }
  friend GradientSample operator+(GradientSample a, const GradientSample& b) { return a += b; }

  double dot(const GradientSample& o) const {
    check_compatible(o, "GradientSample::dot");
    double acc = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) acc += values[i] * o.values[i];
    return acc;
  }
  double squared_norm() const { return dot(*this); }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  void check_compatible(const GradientSample& o, const char* op) const {
    if (values.size() != o.values.size())
      throw ShapeError(std::string(op) + ": length " + std::to_string(values.size()) + " vs " +
                       std::to_string(o.values.size()));
  }
};

/// Ordered collection of named trainable tensors (θ for the policy, γ for
/// the surrogate). Iteration order is insertion order.
class ParamStore {
 public:
  explicit ParamStore(ParamRole role = ParamRole::policy)
      : role_(role), layout_(std::make_shared<ParamLayout>()) {}

  ParamRole role() const { return role_; }

  void add(std::string name, Tensor value) {
    if (index_.count(name)) throw ArgumentError("ParamStore: duplicate parameter '" + name + "'");
    auto layout = std::make_shared<ParamLayout>(*layout_);
    layout->names.push_back(name);
    layout->shapes.push_back(value.shape());
    layout->offsets.push_back(layout->total);
    layout->total += value.size();
    layout_ = std::move(layout);
    index_.emplace(name, tensors_.size());
    tensors_.push_back(std::move(value));
  }

  bool contains(std::string_view name) const { return index_.find(std::string(name)) != index_.end(); }

  std::size_t index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ArgumentError("ParamStore: unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  const Tensor& at(std::string_view name) const { return tensors_[index_of(name)]; }
  Tensor& at(std::string_view name) { return tensors_[index_of(name)]; }

  std::size_t count() const { return tensors_.size(); }
  const std::string& name(std::size_t i) const { return layout_->names[i]; }
  const Tensor& tensor(std::size_t i) const { return tensors_[i]; }
  Tensor& tensor(std::size_t i) { return tensors_[i]; }
  std::size_t offset(std::size_t i) const { return layout_->offsets[i]; }

  /// Total number of scalar parameters.
  std::size_t size() const { return layout_->total; }
  const std::shared_ptr<const ParamLayout>& layout() const { return layout_; }

  std::vector<double> flat() const {
    std::vector<double> out;
    out.reserve(size());
    for (const auto& t : tensors_) out.insert(out.end(), t.vec().begin(), t.vec().end());
    return out;
  }

  void set_flat(std::span<const double> values) {
    if (values.size() != size())
      throw ShapeError("ParamStore::set_flat: expected " + std::to_string(size()) + " values, got " +
                       std::to_string(values.size()));
    std::size_t k = 0;
    for (auto& t : tensors_)
      for (double& v : t.vec()) v = values[k++];
  }

  double& flat_ref(std::size_t flat_index) {
    for (std::size_t i = tensors_.size(); i-- > 0;)
      if (flat_index >= layout_->offsets[i]) return tensors_[i][flat_index - layout_->offsets[i]];
    throw ArgumentError("ParamStore::flat_ref: index out of range");
  }

  /// In-place `θ += scale * g`.
  void axpy(double scale, const GradientSample& g) {
    if (g.size() != size())
      throw ShapeError("ParamStore::axpy: gradient length " + std::to_string(g.size()) + " vs " +
                       std::to_string(size()));
    std::size_t k = 0;
    for (auto& t : tensors_)
      for (double& v : t.vec()) v += scale * g.values[k++];
  }

  GradientSample zero_gradient() const { return GradientSample(layout_); }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    return a.role_ == b.role_ && *a.layout_ == *b.layout_ && a.tensors_ == b.tensors_;
  }

 private:
  ParamRole role_;
  std::shared_ptr<const ParamLayout> layout_;
  std::vector<Tensor> tensors_;
  std::map<std::string, std::size_t> index_;
};

/// Glorot-uniform weight matrix of shape out×in.
inline Tensor glorot(std::size_t out, std::size_t in, Rng& rng, double gain = 1.0) {
  Tensor t({out, in});
  const double a = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  for (double& v : t.vec()) v = rng.uniform(-a, a);
  return t;
}

}  // namespace imtsp

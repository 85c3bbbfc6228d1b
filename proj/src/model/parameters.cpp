#include "codis/model/parameters.hpp"

#include <algorithm>
#include <stdexcept>

namespace codis::model {

Tensor& ParameterStore::add(const std::string& name, const std::string& group, Tensor tensor) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter " + name);
  tensor.set_requires_grad(true);
  index_[name] = entries_.size();
  entries_.push_back({name, group, std::move(tensor)});
  return entries_.back().tensor;
}

Tensor& ParameterStore::add_normal(const std::string& name, const std::string& group, Shape shape,
                                   double std, Rng& rng) {
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = std * rng.normal();
  return add(name, group, Tensor::from(std::move(shape), std::move(values)));
}

Tensor& ParameterStore::add_constant(const std::string& name, const std::string& group, Shape shape,
                                     double value) {
  return add(name, group, Tensor::full(std::move(shape), value));
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter " + name);
  return entries_[it->second].tensor;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter " + name);
  return entries_[it->second].tensor;
}

std::vector<std::string> ParameterStore::groups() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) {
    if (std::find(out.begin(), out.end(), e.group) == out.end()) out.push_back(e.group);
  }
  return out;
}

std::size_t ParameterStore::num_values() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.tensor.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

std::vector<std::vector<double>> ParameterStore::snapshot() const {
  std::vector<std::vector<double>> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.emplace_back(e.tensor.values().begin(), e.tensor.values().end());
  return out;
}

void ParameterStore::restore(const std::vector<std::vector<double>>& values) {
  if (values.size() != entries_.size()) throw std::invalid_argument("restore: parameter count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto dst = entries_[i].tensor.mutable_values();
    if (dst.size() != values[i].size()) {
      throw std::invalid_argument("restore: size mismatch for " + entries_[i].name);
    }
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace codis::model

#pragma once

#include <map>
#include <string>
#include <vector>

#include "codis/numcore/rng.hpp"
#include "codis/numcore/tensor.hpp"

namespace codis::model {

/// Named trainable tensors in registration order, each tagged with a group
/// ("embedding", "experts", "router", ...).
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    std::string group;
    Tensor tensor;
  };

  Tensor& add(const std::string& name, const std::string& group, Tensor tensor);
  // Zero-mean normal with the given std.
  Tensor& add_normal(const std::string& name, const std::string& group, Shape shape, double std, Rng& rng);
  Tensor& add_constant(const std::string& name, const std::string& group, Shape shape, double value);

  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<std::string> groups() const;
  std::size_t num_values() const;

  void zero_grad();
  // Deep copy of all values, e.g. the best checkpoint of a run.
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace codis::model

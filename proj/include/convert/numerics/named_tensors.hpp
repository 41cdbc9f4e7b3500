#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "convert/numerics/tensor.hpp"

namespace convert::nn {

// Insertion-ordered collection of tensors addressable by name. Holds model
// parameters, their gradients and optimizer moments.
template <class T = float>
class NamedTensors {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  Tensor<T>& add(const std::string& name, Tensor<T> value) {
    if (index_.contains(name)) fail(ErrorCode::contract, "duplicate tensor name: " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  Tensor<T>& get(const std::string& name) { return entries_[position(name)].second; }
  const Tensor<T>& get(const std::string& name) const { return entries_[position(name)].second; }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  const Entry& at(std::size_t i) const { return entries_.at(i); }
  Entry& at(std::size_t i) { return entries_.at(i); }

  // Same names and shapes, all values zero.
  NamedTensors zeros_like() const {
    NamedTensors out;
    for (const auto& [name, t] : entries_) out.add(name, Tensor<T>(t.shape()));
    return out;
  }

  friend bool operator==(const NamedTensors& a, const NamedTensors& b) {
    return a.entries_ == b.entries_;
  }

 private:
  std::size_t position(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) fail(ErrorCode::contract, "unknown tensor name: " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class T = float>
using ParameterSet = NamedTensors<T>;

template <class T = float>
using Gradients = NamedTensors<T>;

}  // namespace convert::nn

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "fmc/tensor.hpp"

namespace fmc {

// Named parameter tree, flattened to dotted names ("enc.block0.pw1.weight").
// Order of insertion is the serialization order.
class ParameterSet {
public:
  Tensor &add(const std::string &name, Tensor value);
  Tensor &get(const std::string &name);
  const Tensor &get(const std::string &name) const;
  bool contains(const std::string &name) const;

  std::vector<std::pair<std::string, Tensor>> &entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>> &entries() const {
    return entries_;
  }
  std::size_t size() const { return entries_.size(); }
  Index total_numel() const;

  void zero_grad();
  // Copies values of matching names from `other`; shapes must agree.
  // Returns the number of entries copied.
  std::size_t assign_from(const ParameterSet &other, bool require_all = true);
  void append(const ParameterSet &other, const std::string &prefix = "");

private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Binary checkpoint: "FMCK", u32 entry count, then per entry
//   u32 name length, UTF-8 name, u32 rank, rank x u64 dims,
//   numel x float64, all little-endian.
void save_checkpoint(const std::filesystem::path &path, const ParameterSet &params);
ParameterSet load_checkpoint(const std::filesystem::path &path);
std::vector<unsigned char> serialize_checkpoint(const ParameterSet &params);
ParameterSet deserialize_checkpoint(const std::vector<unsigned char> &bytes);

} // namespace fmc

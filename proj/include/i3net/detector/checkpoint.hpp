#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "i3net/autodiff/tensor.hpp"
#include "i3net/nn/parameters.hpp"

namespace i3net::det {

inline constexpr char kCheckpointMagic[4] = {'I', '3', 'N', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedArray {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;  // stored as little-endian float32
};

// File layout: "I3NT", u32 version, then until EOF for each array:
// u32 name length, UTF-8 name, u32 rank, rank x u32 dims, float32 values.
void save_checkpoint(const std::filesystem::path& file, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& file);

// Parameters with a name prefix, e.g. "detector." + "backbone.block1.weight".
void append_parameters(std::vector<NamedArray>& arrays, const std::string& prefix, const nn::ParameterSet& params);
// Overwrites every parameter of `params` from arrays named prefix + name.
void restore_parameters(const std::vector<NamedArray>& arrays, const std::string& prefix, nn::ParameterSet& params);
const NamedArray& find_array(const std::vector<NamedArray>& arrays, const std::string& name);
const NamedArray* try_find_array(const std::vector<NamedArray>& arrays, const std::string& name);

// Rounds to float32 precision so values survive a checkpoint round trip unchanged.
double to_storage_precision(double v);
void round_to_storage_precision(nn::ParameterSet& params);

}  // namespace i3net::det

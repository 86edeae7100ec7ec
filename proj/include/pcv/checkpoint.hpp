#pragma once

// Checkpoint archive:
//   bytes 0..7  "PCVCKPT1"
//   uint64 LE   header length H
//   H bytes     canonical JSON {"config": ..., "tensors": [{name, shape, offset}, ...]}
//   payload     float32 LE tensors, offsets relative to payload start
// Tensors are written in name order.

#include "pcv/nn.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace pcv::checkpoint {

struct TensorBlob {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json config;
  std::map<std::string, TensorBlob> tensors;

  bool has_prefix(const std::string& prefix) const;
};

Checkpoint snapshot(const nlohmann::json& config, const nn::ParameterStore& store);

std::vector<std::uint8_t> encode(const Checkpoint& ckpt);
Checkpoint decode(std::span<const std::uint8_t> bytes);

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load(const std::filesystem::path& path);

// Copies every checkpoint tensor under prefix into the store; throws
// DataError if either side lacks a tensor, shapes differ, or nothing matched.
void restore(const Checkpoint& ckpt, nn::ParameterStore& store, const std::string& prefix);

}  // namespace pcv::checkpoint

#include "pcv/checkpoint.hpp"

#include "pcv/errors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace pcv::checkpoint {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[8] = {'P', 'C', 'V', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

std::uint64_t get_u64(std::span<const std::uint8_t> in, std::size_t offset) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in[offset + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

}  // namespace

bool Checkpoint::has_prefix(const std::string& prefix) const {
  for (const auto& [name, t] : tensors) {
    if (name.starts_with(prefix)) return true;
  }
  return false;
}

Checkpoint snapshot(const nlohmann::json& config, const nn::ParameterStore& store) {
  Checkpoint ckpt;
  ckpt.config = config;
  for (const auto& [name, t] : store.tensors()) {
    const auto& v = t.var.value();
    TensorBlob blob{v.rows(), v.cols(), {}};
    blob.data.resize(static_cast<std::size_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) blob.data[static_cast<std::size_t>(i)] = static_cast<float>(v.data()[i]);
    ckpt.tensors.emplace(name, std::move(blob));
  }
  return ckpt;
}

std::vector<std::uint8_t> encode(const Checkpoint& ckpt) {
  nlohmann::json index = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    index.push_back({{"name", name}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
    offset += t.data.size() * 4;
  }
  const std::string header = nlohmann::json{{"config", ckpt.config}, {"tensors", index}}.dump();

  std::vector<std::uint8_t> out;
  out.reserve(16 + header.size() + offset);
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  for (const auto& [name, t] : ckpt.tensors) {
    for (float f : t.data) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFFu));
    }
  }
  return out;
}

Checkpoint decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw DataError(DataErrorCode::kBadMagic, "expected PCVCKPT1");
  }
  if (bytes.size() < 16) throw DataError(DataErrorCode::kBadHeader, "missing header length");
  const std::uint64_t header_len = get_u64(bytes, 8);
  if (header_len > bytes.size() - 16) throw DataError(DataErrorCode::kTruncatedPayload, "header extends past end");
  const std::size_t payload = 16 + static_cast<std::size_t>(header_len);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(payload));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrorCode::kBadHeader, e.what());
  }

  Checkpoint ckpt;
  std::uint64_t expected_end = 0;
  try {
    ckpt.config = header.at("config");
    for (const auto& entry : header.at("tensors")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (shape.size() != 2 || shape[0] < 0 || shape[1] < 0) throw DataError(DataErrorCode::kBadHeader, name);
      TensorBlob blob{shape[0], shape[1], {}};
      const std::uint64_t count = static_cast<std::uint64_t>(shape[0]) * static_cast<std::uint64_t>(shape[1]);
      if (offset + count * 4 > bytes.size() - payload) {
        throw DataError(DataErrorCode::kTruncatedPayload, "tensor " + name + " extends past end");
      }
      blob.data.resize(count);
      std::size_t at = payload + static_cast<std::size_t>(offset);
      for (auto& f : blob.data) {
        std::uint32_t bits = 0;
        for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(bytes[at + static_cast<std::size_t>(i)]) << (8 * i);
        f = std::bit_cast<float>(bits);
        at += 4;
      }
      expected_end = std::max(expected_end, offset + count * 4);
      ckpt.tensors.emplace(name, std::move(blob));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrorCode::kBadHeader, e.what());
  }
  if (payload + expected_end != bytes.size()) {
    throw DataError(DataErrorCode::kTrailingBytes, "payload size does not match tensor index");
  }
  return ckpt;
}

void save(const fs::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode(ckpt);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError(DataErrorCode::kIo, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError(DataErrorCode::kMissingFile, "checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  return decode(bytes);
}

void restore(const Checkpoint& ckpt, nn::ParameterStore& store, const std::string& prefix) {
  int matched = 0;
  for (const auto& [name, blob] : ckpt.tensors) {
    if (!name.starts_with(prefix)) continue;
    if (!store.contains(name)) throw DataError(DataErrorCode::kShapeMismatch, "model has no tensor " + name);
    nn::Var v = store.get(name);
    auto& m = v.mutable_value();
    if (m.rows() != blob.rows || m.cols() != blob.cols) {
      throw DataError(DataErrorCode::kShapeMismatch, "tensor " + name + " has a different shape");
    }
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(blob.data[static_cast<std::size_t>(i)]);
    ++matched;
  }
  if (matched == 0) throw DataError(DataErrorCode::kShapeMismatch, "checkpoint has no tensors under '" + prefix + "'");
  for (const auto& [name, t] : store.tensors()) {
    if (name.starts_with(prefix) && !ckpt.tensors.contains(name)) {
      throw DataError(DataErrorCode::kShapeMismatch, "checkpoint lacks tensor " + name);
    }
  }
}

}  // namespace pcv::checkpoint

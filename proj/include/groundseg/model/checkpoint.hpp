#pragma once

// Binary archive: magic, schema version, a JSON metadata block, then named
// float32 tensors.
//
//   "GSEGCKPT" | u32 schema | u64 json_len | json | u32 n_tensors |
//   n x ( u32 name_len | name | u32 rank | rank x u64 dim | f32[prod(dims)] )
//
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "groundseg/model/layers.hpp"

namespace groundseg::model {

inline constexpr std::uint32_t kArchiveSchemaVersion = 1;

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;
};

struct Archive {
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
  std::vector<TensorRecord> tensors;

  [[nodiscard]] const TensorRecord* find(const std::string& name) const;
};

void write_archive(const Archive& archive, const std::filesystem::path& path);
[[nodiscard]] Archive read_archive(const std::filesystem::path& path);

/// Appends every parameter of `store` as a float32 tensor, names prefixed by `prefix`.
template <typename T>
void export_tensors(const std::vector<NamedParam<T>>& params, const std::string& prefix, Archive& out) {
  for (const auto& p : params) {
    const auto& v = p.var.value();
    TensorRecord rec{prefix + p.name,
                     {static_cast<std::uint64_t>(v.rows()), static_cast<std::uint64_t>(v.cols())},
                     std::vector<float>(static_cast<std::size_t>(v.size()))};
    for (Eigen::Index i = 0; i < v.size(); ++i) rec.data[static_cast<std::size_t>(i)] = static_cast<float>(v.data()[i]);
    out.tensors.push_back(std::move(rec));
  }
}

/// Copies tensors into matching parameters. Every parameter must be present
/// with an identical shape.
template <typename T>
void import_tensors(std::vector<NamedParam<T>>& params, const std::string& prefix, const Archive& in) {
  for (auto& p : params) {
    const TensorRecord* rec = in.find(prefix + p.name);
    if (rec == nullptr) throw Error("checkpoint is missing tensor " + prefix + p.name);
    auto& v = p.var.mutable_value();
    if (rec->dims.size() != 2 || rec->dims[0] != static_cast<std::uint64_t>(v.rows()) ||
        rec->dims[1] != static_cast<std::uint64_t>(v.cols())) {
      throw Error("checkpoint tensor " + prefix + p.name + " has the wrong shape");
    }
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<T>(rec->data[static_cast<std::size_t>(i)]);
  }
}

}  // namespace groundseg::model

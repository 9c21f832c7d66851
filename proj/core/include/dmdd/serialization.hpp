#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dmdd/tensor.hpp"

namespace dmdd {

// Binary container shared by checkpoints and backbone weight files.
//
//   "DMDDTNS1"
//   u32 meta_count   { str key, str value }*
//   u32 tensor_count { str name, u32 rank, i32 dims[rank], f64 values[numel] }*
//
// Strings are u32 length + bytes; all integers and doubles little-endian.
struct TensorArchive {
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor* find(const std::string& name) const;
    const Tensor& get(const std::string& name) const;  // throws corrupt-dataset if absent
    std::string meta_or(const std::string& key, const std::string& fallback) const;
};

void write_archive(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive read_archive(const std::filesystem::path& path);

// Hash of the file bytes, for "same run twice gives the same checkpoint" checks.
std::string file_hash(const std::filesystem::path& path);

}  // namespace dmdd

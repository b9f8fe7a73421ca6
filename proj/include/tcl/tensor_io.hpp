#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "tcl/tensor.hpp"

namespace tcl {

// Binary tensor format, little-endian: magic "TCLT", u32 rank, u64 extents,
// raw f64 payload. Shared by checkpoints, corpora and map dumps.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

// FNV-1a 64 over raw bytes; used for artifact digests and determinism checks.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::uint64_t fnv1a64(const std::string& s);
std::uint64_t tensor_digest(const Tensor& t);
std::uint64_t file_digest(const std::string& path);

// 8-bit binary PGM; values are min-max scaled per image (flat maps render 0).
void write_pgm(const std::string& path, std::size_t h, std::size_t w,
               const std::vector<double>& values);

} // namespace tcl

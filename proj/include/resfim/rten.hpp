#pragma once

#include <resfim/tensor.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>

namespace resfim {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// RTEN layout: "RTEN", u32 rank, u32 dims[rank], f64 payload; all little-endian.
std::string encode_rten(const Tensor& t);
Tensor decode_rten(const std::string& bytes);

void write_rten(std::ostream& os, const Tensor& t);
Tensor read_rten(std::istream& is);

void save_rten(const std::filesystem::path& path, const Tensor& t);
Tensor load_rten(const std::filesystem::path& path);

/// FNV-1a, used for layout hashes and checksum audits.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

} // namespace resfim

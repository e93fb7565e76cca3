#ifndef ALIGN_HASH_HPP
#define ALIGN_HASH_HPP

#include <filesystem>
#include <string>
#include <string_view>

namespace align {

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(std::string_view bytes);

}  // namespace align

#endif  // ALIGN_HASH_HPP

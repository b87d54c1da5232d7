#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gda {

// Hex-encoded SHA-256.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::string& path);  // throws IoError if unreadable

}  // namespace gda

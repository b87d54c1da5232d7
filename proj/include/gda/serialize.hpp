#pragma once

#include <json.hpp>
#include <string>

#include "gda/tensor.hpp"

namespace gda {

// All artifacts use ordered_json so key order (and therefore file bytes)
// is insertion order, stable across runs.
using Json = nlohmann::ordered_json;

Json tensor_to_json(const Tensor& t);          // {"shape":[...], "data":[...]}
Tensor tensor_from_json(const Json& j);        // throws ParseError on malformed input

void write_text_atomic(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);  // throws IoError if unreadable

Json load_json(const std::string& path);  // IoError / ParseError
void save_json(const std::string& path, const Json& j);  // atomic, 1-space indent

// Hash of a JSON document's canonical serialization.
std::string json_sha256(const Json& j);

}  // namespace gda

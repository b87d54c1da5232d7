#include "gda/serialize.hpp"

#include <cstdio>
#include <fstream>

#include "gda/common.hpp"
#include "gda/hash.hpp"

namespace gda {

Json tensor_to_json(const Tensor& t) {
    Json j;
    j["shape"] = t.shape;
    j["data"] = t.data;
    return j;
}

Tensor tensor_from_json(const Json& j) {
    if (!j.is_object() || !j.contains("shape") || !j.contains("data"))
        throw ParseError("tensor json needs shape and data");
    try {
        auto shape = j.at("shape").get<std::vector<int>>();
        auto data = j.at("data").get<std::vector<real>>();
        return Tensor(std::move(shape), std::move(data));
    } catch (const Json::exception& e) {
        throw ParseError(std::string("tensor json malformed: ") + e.what());
    } catch (const ContractError& e) {
        throw ParseError(std::string("tensor json inconsistent: ") + e.what());
    }
}

void write_text_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write: " + tmp);
        f.write(content.data(), static_cast<long>(content.size()));
        if (!f) throw IoError("short write: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw IoError("rename failed: " + path);
}

std::string read_text(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

Json load_json(const std::string& path) {
    std::string text = read_text(path);
    try {
        return Json::parse(text);
    } catch (const Json::exception& e) {
        throw ParseError("invalid json in " + path + ": " + e.what());
    }
}

void save_json(const std::string& path, const Json& j) {
    write_text_atomic(path, j.dump(1) + "\n");
}

std::string json_sha256(const Json& j) { return sha256_hex(j.dump()); }

}  // namespace gda

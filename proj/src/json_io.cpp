#include "steer/json_io.hpp"

#include <fstream>
#include <stdexcept>

namespace steer {

nlohmann::json tensor_to_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

Tensor tensor_from_json(const nlohmann::json& j) {
    return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << j.dump(1) << '\n';
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return nlohmann::json::parse(in);
}

}  // namespace steer

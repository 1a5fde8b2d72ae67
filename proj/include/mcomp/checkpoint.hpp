#ifndef MCOMP_CHECKPOINT_HPP
#define MCOMP_CHECKPOINT_HPP

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mcomp/tensor.hpp"
#include "mcomp/unet.hpp"

namespace mcomp {

// Self-describing container: magic, a JSON header (version, caller metadata,
// named array directory), then raw little-endian doubles. Writes go through a
// temp file + rename so a crash never leaves a torn checkpoint.
namespace ckpt {

inline constexpr char kMagic[8] = {'M', 'C', 'K', 'P', '0', '0', '0', '1'};
inline constexpr int kVersion = 1;

struct Container {
    nlohmann::json meta;  // caller-owned section
    ParamStore params;
};

inline void save(const std::string& path, const Container& c) {
    nlohmann::json header;
    header["version"] = kVersion;
    header["meta"] = c.meta;
    nlohmann::json dir = nlohmann::json::array();
    uint64_t offset = 0;  // in doubles, from start of payload
    for (const auto& name : c.params.names) {
        const Tensor& t = c.params.get(name);
        dir.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
        offset += uint64_t(t.numel());
    }
    header["arrays"] = dir;
    const std::string hs = header.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("checkpoint save: cannot open " + tmp);
        f.write(kMagic, 8);
        const uint64_t hlen = hs.size();
        f.write(reinterpret_cast<const char*>(&hlen), 8);
        f.write(hs.data(), std::streamsize(hs.size()));
        for (const auto& name : c.params.names) {
            const Tensor& t = c.params.get(name);
            f.write(reinterpret_cast<const char*>(t.data.data()),
                    std::streamsize(t.data.size() * sizeof(double)));
        }
        if (!f) throw std::runtime_error("checkpoint save: short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

inline Container load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint load: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::string(magic, 8) != std::string(kMagic, 8))
        throw std::runtime_error("checkpoint load: bad magic in " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    if (!f) throw std::runtime_error("checkpoint load: truncated header in " + path);
    nlohmann::json header = nlohmann::json::parse(hs);
    if (!header.contains("version"))
        throw std::runtime_error("checkpoint load: missing version field");
    if (header["version"].get<int>() != kVersion)
        throw std::runtime_error("checkpoint load: unsupported version " +
                                 header["version"].dump());
    Container c;
    c.meta = header.value("meta", nlohmann::json::object());
    for (const auto& e : header["arrays"]) {
        const std::string name = e.at("name").get<std::string>();
        const std::vector<int> shape = e.at("shape").get<std::vector<int>>();
        Tensor t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()),
               std::streamsize(t.data.size() * sizeof(double)));
        if (!f) throw std::runtime_error("checkpoint load: truncated payload at array " + name);
        c.params.add(name, std::move(t));
    }
    return c;
}

}  // namespace ckpt
}  // namespace mcomp

#endif

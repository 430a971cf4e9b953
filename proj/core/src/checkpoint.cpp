#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "dape/config.hpp"
#include "dape/model.hpp"

namespace dape {

namespace {

constexpr char kMagic[8] = {'D', 'A', 'P', 'E', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error("corrupt checkpoint: truncated file");
    return v;
}
std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw std::runtime_error("corrupt checkpoint: truncated file");
    return v;
}

struct Record {
    std::string name;
    std::vector<int> shape;
    std::vector<float> payload;
};

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
    namespace fs = std::filesystem;
    fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    fs::path tmp = target;
    tmp += ".tmp";

    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("io error: cannot write '" + tmp.string() + "'");
        out.write(kMagic, sizeof(kMagic));
        write_u32(out, kVersion);

        nlohmann::json meta{{"model", model_to_json(model.config())},
                            {"pe", pe_to_json(model.config().pe)},
                            {"seed", model.seed()}};
        std::string meta_str = meta.dump();
        write_u64(out, meta_str.size());
        out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

        const auto& params = model.parameters();
        const auto& names = model.parameter_names();
        write_u64(out, params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            write_u32(out, static_cast<std::uint32_t>(names[i].size()));
            out.write(names[i].data(), static_cast<std::streamsize>(names[i].size()));
            const auto& shape = params[i].shape();
            write_u32(out, static_cast<std::uint32_t>(shape.size()));
            for (int d : shape) write_u32(out, static_cast<std::uint32_t>(d));
            std::vector<float> payload(params[i].numel());
            const auto& data = params[i].data();
            for (std::size_t k = 0; k < payload.size(); ++k)
                payload[k] = static_cast<float>(data[k]);
            out.write(reinterpret_cast<const char*>(payload.data()),
                      static_cast<std::streamsize>(payload.size() * sizeof(float)));
        }
        if (!out) throw std::runtime_error("io error: failed writing '" + tmp.string() + "'");
    }
    fs::rename(tmp, target);
}

namespace {

struct CheckpointFile {
    ModelConfig config;
    std::uint64_t seed = 0;
    std::vector<Record> records;
};

CheckpointFile read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("io error: cannot open checkpoint '" + path + "'");
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("corrupt checkpoint: bad magic header in '" + path + "'");
    std::uint32_t version = read_u32(in);
    if (version != kVersion)
        throw std::runtime_error("corrupt checkpoint: unsupported format version " +
                                 std::to_string(version));

    std::uint64_t meta_len = read_u64(in);
    std::string meta_str(meta_len, '\0');
    in.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw std::runtime_error("corrupt checkpoint: truncated config block");

    CheckpointFile file;
    try {
        nlohmann::json meta = nlohmann::json::parse(meta_str);
        file.config = model_from_json(meta.at("model"));
        file.config.pe = pe_from_json(meta.at("pe"));
        file.seed = meta.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("corrupt checkpoint: bad config block: ") + e.what());
    }

    std::uint64_t count = read_u64(in);
    file.records.resize(count);
    for (auto& rec : file.records) {
        std::uint32_t name_len = read_u32(in);
        rec.name.resize(name_len);
        in.read(rec.name.data(), name_len);
        std::uint32_t rank = read_u32(in);
        rec.shape.resize(rank);
        std::size_t numel = 1;
        for (auto& d : rec.shape) {
            d = static_cast<int>(read_u32(in));
            if (d <= 0) throw std::runtime_error("corrupt checkpoint: bad shape in record " + rec.name);
            numel *= static_cast<std::size_t>(d);
        }
        rec.payload.resize(numel);
        in.read(reinterpret_cast<char*>(rec.payload.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        if (!in) throw std::runtime_error("corrupt checkpoint: truncated payload in record " + rec.name);
    }
    return file;
}

void apply_records(Model& model, const std::vector<Record>& records) {
    const auto& names = model.parameter_names();
    auto& params = model.parameters();
    std::vector<bool> used(records.size(), false);
    for (std::size_t i = 0; i < names.size(); ++i) {
        const Record* found = nullptr;
        for (std::size_t r = 0; r < records.size(); ++r) {
            if (records[r].name == names[i]) {
                found = &records[r];
                used[r] = true;
                break;
            }
        }
        if (!found) {
            std::string group = names[i].substr(0, names[i].find_last_of('.'));
            throw std::runtime_error("checkpoint mismatch: missing parameter '" + names[i] +
                                     "' (group '" + group + "')");
        }
        if (found->shape != params[i].shape())
            throw std::runtime_error("checkpoint mismatch: parameter '" + names[i] + "' has shape " +
                                     shape_str(found->shape) + ", model expects " +
                                     shape_str(params[i].shape()));
        auto& data = params[i].data();
        for (std::size_t k = 0; k < data.size(); ++k)
            data[k] = static_cast<double>(found->payload[k]);
    }
    for (std::size_t r = 0; r < records.size(); ++r)
        if (!used[r])
            throw std::runtime_error("checkpoint mismatch: checkpoint carries parameter '" +
                                     records[r].name + "' unknown to this configuration");
}

}  // namespace

Model load_checkpoint(const std::string& path) {
    CheckpointFile file = read_checkpoint(path);
    Model model(file.config, file.seed);
    apply_records(model, file.records);
    return model;
}

void load_checkpoint_params(Model& model, const std::string& path) {
    CheckpointFile file = read_checkpoint(path);
    apply_records(model, file.records);
}

}  // namespace dape

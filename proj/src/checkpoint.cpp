#include "diffrate/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace diffrate {

namespace {

constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& buf;
    size_t off = 0;
    explicit Reader(const std::string& b) : buf(b) {}

    void need(size_t n, const char* what) {
        if (off + n > buf.size())
            throw IoError("checkpoint truncated at offset " + std::to_string(off) +
                          " while reading " + what);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[off + i])) << (8 * i);
        off += 4;
        return v;
    }
    double f64(const char* what) {
        need(8, what);
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<uint64_t>(static_cast<uint8_t>(buf[off + i])) << (8 * i);
        off += 8;
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }
    std::string str(size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(off, n);
        off += n;
        return s;
    }
};

void put_record(std::string& out, const std::string& name, const Tensor& t) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.append(name);
    put_u32(out, static_cast<uint32_t>(t.shape().size()));
    for (int64_t d : t.shape()) put_u32(out, static_cast<uint32_t>(d));
    for (double v : t.data()) put_f64(out, v);
}

}  // namespace

void save_checkpoint(const std::string& path, const BackboneParams& params,
                     const std::map<std::string, Tensor>& extras) {
    std::string out;
    out.append("DRCK");
    put_u32(out, kVersion);
    const ModelConfig& c = params.config;
    for (int v : {c.depth, c.token_count, c.embed_dim, c.head_count, c.patch_size,
                  c.image_size, c.class_count, c.channels})
        put_u32(out, static_cast<uint32_t>(v));

    auto named = params.named_params();
    put_u32(out, static_cast<uint32_t>(named.size() + extras.size()));
    for (const auto& [name, t] : named) put_record(out, name, *t);
    for (const auto& [name, t] : extras) put_record(out, name, t);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to checkpoint: " + path);
}

BackboneParams load_checkpoint(const std::string& path,
                               std::map<std::string, Tensor>* extras) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r(buf);
    if (r.str(4, "magic") != "DRCK") throw IoError("bad checkpoint magic in " + path);
    uint32_t version = r.u32("version");
    if (version != kVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version));

    ModelConfig c;
    c.depth = static_cast<int>(r.u32("depth"));
    c.token_count = static_cast<int>(r.u32("token_count"));
    c.embed_dim = static_cast<int>(r.u32("embed_dim"));
    c.head_count = static_cast<int>(r.u32("head_count"));
    c.patch_size = static_cast<int>(r.u32("patch_size"));
    c.image_size = static_cast<int>(r.u32("image_size"));
    c.class_count = static_cast<int>(r.u32("class_count"));
    c.channels = static_cast<int>(r.u32("channels"));
    c.validate();

    std::map<std::string, Tensor> records;
    uint32_t count = r.u32("record count");
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t name_len = r.u32("name length");
        std::string name = r.str(name_len, "name");
        uint32_t rank = r.u32("rank");
        if (rank < 1 || rank > 2)
            throw IoError("record " + name + " has unsupported rank " + std::to_string(rank));
        std::vector<int64_t> shape;
        int64_t numel = 1;
        for (uint32_t k = 0; k < rank; ++k) {
            shape.push_back(static_cast<int64_t>(r.u32("dimension")));
            numel *= shape.back();
        }
        std::vector<double> data(static_cast<size_t>(numel));
        for (int64_t k = 0; k < numel; ++k) data[static_cast<size_t>(k)] = r.f64("values");
        records.emplace(name, Tensor(std::move(shape), std::move(data)));
    }

    BackboneParams params = BackboneParams::init(c, 0);
    for (auto& [name, slot] : params.named_params()) {
        auto it = records.find(name);
        if (it == records.end()) throw IoError("checkpoint missing parameter " + name);
        if (it->second.shape() != slot->shape())
            throw IoError("checkpoint parameter " + name + " has unexpected shape");
        *slot = it->second;
        records.erase(it);
    }
    if (extras) *extras = std::move(records);
    return params;
}

}  // namespace diffrate

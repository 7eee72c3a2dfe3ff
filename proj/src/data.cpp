#include "diffrate/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "diffrate/rng.hpp"

namespace diffrate {

using detail::require;

void DataRecipe::validate() const {
    require(image_size >= 1 && patch_size >= 1 && image_size % patch_size == 0,
            "recipe: patch size must divide image size");
    require(channels == 1, "recipe: only single-channel synthetic data is generated");
    require(class_count >= 2, "recipe: need at least two classes");
    require(foreground_patches >= 1 && foreground_patches <= patch_count(),
            "recipe: foreground patch count out of range");
    require(noise >= 0.0 && amplitude > 0.0, "recipe: noise/amplitude out of range");
    require(train_size >= 1 && val_size >= 1, "recipe: split sizes must be positive");
}

namespace {

uint64_t split_tag(const std::string& split) {
    uint64_t h = 1469598103934665603ULL;
    for (char c : split) {
        h ^= static_cast<uint8_t>(c);
        h *= 1099511628211ULL;
    }
    return h;
}

double quantize(double v) {
    v = std::min(1.0, std::max(0.0, v));
    return std::round(v * 255.0) / 255.0;
}

}  // namespace

std::vector<double> class_pattern(const DataRecipe& recipe, int cls) {
    Rng rng(mix_keys(recipe.seed, 0x70617474ULL, static_cast<uint64_t>(cls)));
    std::vector<double> p(static_cast<size_t>(recipe.patch_dim()));
    for (double& v : p) v = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return p;
}

std::vector<int> foreground_positions(const DataRecipe& recipe, const std::string& split,
                                      size_t index) {
    Rng rng(mix_keys(recipe.seed, split_tag(split), static_cast<uint64_t>(index), 0xf9ULL));
    std::vector<int> all(static_cast<size_t>(recipe.patch_count()));
    for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    // partial Fisher-Yates for the first K positions
    for (int i = 0; i < recipe.foreground_patches; ++i) {
        int j = static_cast<int>(rng.uniform_int(i, recipe.patch_count() - 1));
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
    }
    all.resize(static_cast<size_t>(recipe.foreground_patches));
    std::sort(all.begin(), all.end());
    return all;
}

ToyDataset gen_dataset(const DataRecipe& recipe, const std::string& split) {
    recipe.validate();
    const int count = split == "val" ? recipe.val_size : recipe.train_size;
    const int s = recipe.image_size, ps = recipe.patch_size, grid = recipe.grid();

    std::vector<std::vector<double>> patterns;
    for (int c = 0; c < recipe.class_count; ++c) patterns.push_back(class_pattern(recipe, c));

    ToyDataset out;
    out.image_size = s;
    out.channels = recipe.channels;
    out.class_count = recipe.class_count;
    out.split = split;
    out.seed = recipe.seed;
    for (int i = 0; i < count; ++i) {
        int label = i % recipe.class_count;
        Rng rng(mix_keys(recipe.seed, split_tag(split), static_cast<uint64_t>(i)));
        std::vector<double> img(static_cast<size_t>(s) * s);
        for (double& v : img) v = 0.5 + recipe.noise * rng.normal();
        for (int pos : foreground_positions(recipe, split, static_cast<size_t>(i))) {
            int gy = pos / grid, gx = pos % grid;
            const std::vector<double>& pat = patterns[static_cast<size_t>(label)];
            int pi = 0;
            for (int py = 0; py < ps; ++py)
                for (int px = 0; px < ps; ++px)
                    img[static_cast<size_t>((gy * ps + py) * s + gx * ps + px)] +=
                        recipe.amplitude * pat[static_cast<size_t>(pi++)];
        }
        for (double& v : img) v = quantize(v);
        out.images.push_back(std::move(img));
        out.labels.push_back(label);
    }
    return out;
}

ToyDataset ToyDataset::head(size_t n) const {
    ToyDataset out = *this;
    n = std::min(n, images.size());
    out.images.assign(images.begin(), images.begin() + static_cast<ptrdiff_t>(n));
    out.labels.assign(labels.begin(), labels.begin() + static_cast<ptrdiff_t>(n));
    return out;
}

ToyDataset ToyDataset::stride(size_t step) const {
    require(step >= 1, "stride: step must be positive");
    ToyDataset out = *this;
    out.images.clear();
    out.labels.clear();
    for (size_t i = 0; i < images.size(); i += step) {
        out.images.push_back(images[i]);
        out.labels.push_back(labels[i]);
    }
    return out;
}

// ---- IDX -----------------------------------------------------------------------

namespace {

struct IdxReader {
    std::string buf;
    size_t off = 0;
    std::string path;

    uint32_t u32_be(const char* what) {
        if (off + 4 > buf.size())
            throw std::runtime_error(path + ": truncated at offset " + std::to_string(off) +
                                     " while reading " + what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v = (v << 8) | static_cast<uint8_t>(buf[off + static_cast<size_t>(i)]);
        off += 4;
        return v;
    }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void put_u32_be(std::string& out, uint32_t v) {
    for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace

ToyDataset ingest_idx(const std::string& images_path, const std::string& labels_path) {
    IdxReader img{slurp(images_path), 0, images_path};
    if (img.u32_be("magic") != 0x00000803u)
        throw std::runtime_error(images_path + ": bad IDX3 magic");
    uint32_t count = img.u32_be("count");
    uint32_t rows = img.u32_be("rows");
    uint32_t cols = img.u32_be("cols");
    if (rows != cols) throw std::runtime_error(images_path + ": images must be square");
    size_t need = static_cast<size_t>(count) * rows * cols;
    if (img.buf.size() - img.off < need)
        throw std::runtime_error(images_path + ": truncated at offset " +
                                 std::to_string(img.buf.size()) + ", expected " +
                                 std::to_string(img.off + need) + " bytes");

    IdxReader lab{slurp(labels_path), 0, labels_path};
    if (lab.u32_be("magic") != 0x00000801u)
        throw std::runtime_error(labels_path + ": bad IDX1 magic");
    uint32_t lcount = lab.u32_be("count");
    if (lcount != count)
        throw std::runtime_error(labels_path + ": label count " + std::to_string(lcount) +
                                 " does not match image count " + std::to_string(count));
    if (lab.buf.size() - lab.off < count)
        throw std::runtime_error(labels_path + ": truncated at offset " +
                                 std::to_string(lab.buf.size()));

    ToyDataset out;
    out.image_size = static_cast<int>(rows);
    out.channels = 1;
    out.split = "idx";
    int max_label = 0;
    for (uint32_t i = 0; i < count; ++i) {
        std::vector<double> pix(static_cast<size_t>(rows) * cols);
        for (size_t p = 0; p < pix.size(); ++p)
            pix[p] = static_cast<uint8_t>(img.buf[img.off + static_cast<size_t>(i) * rows * cols + p]) /
                     255.0;
        out.images.push_back(std::move(pix));
        int y = static_cast<uint8_t>(lab.buf[lab.off + i]);
        max_label = std::max(max_label, y);
        out.labels.push_back(y);
    }
    out.class_count = max_label + 1;
    return out;
}

void write_idx(const ToyDataset& data, const std::string& images_path,
               const std::string& labels_path) {
    require(data.channels == 1, "write_idx: IDX images are single channel");
    std::string img;
    put_u32_be(img, 0x00000803u);
    put_u32_be(img, static_cast<uint32_t>(data.size()));
    put_u32_be(img, static_cast<uint32_t>(data.image_size));
    put_u32_be(img, static_cast<uint32_t>(data.image_size));
    for (const auto& im : data.images)
        for (double v : im)
            img.push_back(static_cast<char>(
                static_cast<uint8_t>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0))));

    std::string lab;
    put_u32_be(lab, 0x00000801u);
    put_u32_be(lab, static_cast<uint32_t>(data.size()));
    for (int y : data.labels) lab.push_back(static_cast<char>(static_cast<uint8_t>(y)));

    std::ofstream fi(images_path, std::ios::binary | std::ios::trunc);
    if (!fi) throw std::runtime_error("cannot write " + images_path);
    fi.write(img.data(), static_cast<std::streamsize>(img.size()));
    std::ofstream fl(labels_path, std::ios::binary | std::ios::trunc);
    if (!fl) throw std::runtime_error("cannot write " + labels_path);
    fl.write(lab.data(), static_cast<std::streamsize>(lab.size()));
}

}  // namespace diffrate

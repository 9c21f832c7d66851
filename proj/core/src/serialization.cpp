#include "dmdd/serialization.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dmdd/error.hpp"

namespace dmdd {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'D', 'M', 'D', 'D', 'T', 'N', 'S', '1'};

class Writer {
public:
    explicit Writer(std::ofstream& out) : out_(out) {}
    void u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
    void i32(std::int32_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        out_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }
    void doubles(const std::vector<double>& v) {
        out_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    }

private:
    std::ofstream& out_;
};

class Reader {
public:
    Reader(std::ifstream& in, std::string name) : in_(in), name_(std::move(name)) {}
    void raw(void* dst, std::size_t n) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        require(static_cast<std::size_t>(in_.gcount()) == n, ErrorKind::CorruptDataset,
                "truncated archive " + name_);
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::int32_t i32() {
        std::int32_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::string str() {
        const auto n = u32();
        require(n < (1u << 28), ErrorKind::CorruptDataset, "implausible string length in " + name_);
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }

private:
    std::ifstream& in_;
    std::string name_;
};

}  // namespace

const Tensor* TensorArchive::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

const Tensor& TensorArchive::get(const std::string& name) const {
    const Tensor* t = find(name);
    require(t != nullptr, ErrorKind::CorruptDataset, "archive has no tensor '" + name + "'");
    return *t;
}

std::string TensorArchive::meta_or(const std::string& key, const std::string& fallback) const {
    auto it = meta.find(key);
    return it == meta.end() ? fallback : it->second;
}

void write_archive(const TensorArchive& archive, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    // Write to a sibling temp file, then rename, so readers never see a partial file.
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorKind::IoError, "cannot open " + tmp.string() + " for writing");
        out.write(kMagic, sizeof kMagic);
        Writer w(out);
        w.u32(static_cast<std::uint32_t>(archive.meta.size()));
        for (const auto& [k, v] : archive.meta) {
            w.str(k);
            w.str(v);
        }
        w.u32(static_cast<std::uint32_t>(archive.tensors.size()));
        for (const auto& [name, t] : archive.tensors) {
            w.str(name);
            w.u32(static_cast<std::uint32_t>(t.rank()));
            for (int d : t.shape()) w.i32(d);
            w.doubles(t.vec());
        }
        require(out.good(), ErrorKind::IoError, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

TensorArchive read_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::IoError, "cannot open " + path.string());
    char magic[sizeof kMagic];
    in.read(magic, sizeof magic);
    require(in.gcount() == sizeof magic && std::memcmp(magic, kMagic, sizeof kMagic) == 0,
            ErrorKind::CorruptDataset, path.string() + " is not a tensor archive");
    Reader r(in, path.string());
    TensorArchive archive;
    const auto n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        auto k = r.str();
        archive.meta[k] = r.str();
    }
    const auto n_tensors = r.u32();
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        auto name = r.str();
        const auto rank = r.u32();
        require(rank <= 8, ErrorKind::CorruptDataset, "implausible tensor rank in " + path.string());
        Shape shape(rank);
        for (auto& d : shape) {
            d = r.i32();
            require(d >= 0, ErrorKind::CorruptDataset, "negative dimension in " + path.string());
        }
        Tensor t(shape);
        r.raw(t.data().data(), t.numel() * sizeof(double));
        archive.tensors.emplace_back(std::move(name), std::move(t));
    }
    return archive;
}

std::string file_hash(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::IoError, "cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    Fnv1a h;
    h.update(bytes);
    return h.hex();
}

}  // namespace dmdd

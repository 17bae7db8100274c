#include "galbnn/store.hpp"

#include "galbnn/errors.hpp"

#include <boost/crc.hpp>
#include <openssl/sha.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace galbnn {

namespace {

using Crc64 = boost::crc_optimal<64, 0x42F0E1EBA9EA3693ULL, 0xFFFFFFFFFFFFFFFFULL,
                                 0xFFFFFFFFFFFFFFFFULL, true, true>;

constexpr std::size_t kPreambleBytes = 12;  // magic + version + header length
constexpr std::size_t kTrailerBytes = 8;

class ByteWriter {
public:
    void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }

    void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }

    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }

    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

    void f32s(std::span<const float> v) {
        for (float x : v) f32(x);
    }

    void str(std::string_view s) { buf_.append(s); }

    std::string& buffer() { return buf_; }

private:
    std::string buf_;
};

class ByteReader {
public:
    ByteReader(std::string_view data, std::size_t end) : data_(data), end_(end) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return end_ - pos_; }

    void need(std::size_t n, const char* what) const {
        if (n > end_ - pos_) throw CorruptionError(std::string("truncated file while reading ") + what, pos_);
    }

    std::uint8_t u8() {
        need(1, "u8");
        return static_cast<std::uint8_t>(data_[pos_++]);
    }

    std::uint64_t uint(int width, const char* what) {
        need(static_cast<std::size_t>(width), what);
        std::uint64_t v = 0;
        for (int i = 0; i < width; ++i)
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(width);
        return v;
    }

    std::uint16_t u16() { return static_cast<std::uint16_t>(uint(2, "u16")); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4, "u32")); }
    std::uint64_t u64() { return uint(8, "u64"); }
    float f32() { return std::bit_cast<float>(static_cast<std::uint32_t>(uint(4, "f32"))); }
    double f64() { return std::bit_cast<double>(uint(8, "f64")); }

    void f32s(std::vector<float>& out, std::size_t n) {
        need(n * 4, "pixel block");
        out.resize(n);
        for (auto& x : out) x = f32();
    }

    std::string str(std::size_t n) {
        need(n, "string");
        std::string s(data_.substr(pos_, n));
        pos_ += n;
        return s;
    }

private:
    std::string_view data_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

std::string finish(const char magic[4], unsigned version, const nlohmann::json& header,
                   const std::string& body) {
    ByteWriter out;
    const std::string header_text = header.dump();
    out.bytes(magic, 4);
    out.u32(version);
    out.u32(static_cast<std::uint32_t>(header_text.size()));
    out.str(header_text);
    out.str(body);
    out.u64(crc64(out.buffer()));
    return std::move(out.buffer());
}

std::string atomic_write(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot open '" + tmp.string() + "' for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        f.flush();
        if (!f) throw IoError("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
    return content_hash(bytes);
}

std::string slurp(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open '" + path.string() + "'");
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

struct Opened {
    std::string bytes;
    unsigned version = 0;
    nlohmann::json header;
    std::size_t body_offset = 0;
    std::size_t body_end = 0;
};

// Validates magic, version and checksum; parses the header JSON.
Opened open_container(const std::filesystem::path& path, const char magic[4], unsigned supported,
                      const char* kind) {
    Opened o;
    o.bytes = slurp(path);
    const std::string& b = o.bytes;
    if (b.size() < kPreambleBytes + kTrailerBytes)
        throw CorruptionError(std::string(kind) + " file too short", b.size());
    if (std::memcmp(b.data(), magic, 4) != 0)
        throw CorruptionError(std::string("bad magic for ") + kind + " file", 0);
    ByteReader pre(b, b.size());
    pre.str(4);
    o.version = pre.u32();
    if (o.version == 0 || o.version > supported)
        throw VersionError(std::string("unsupported ") + kind + " format", o.version, supported);
    const std::size_t crc_offset = b.size() - kTrailerBytes;
    ByteReader trailer(b, b.size());
    trailer.str(crc_offset);
    const std::uint64_t stored = trailer.u64();
    const std::uint64_t actual = crc64(std::string_view(b).substr(0, crc_offset));
    if (stored != actual) throw CorruptionError(std::string(kind) + " checksum mismatch", crc_offset);
    const std::uint32_t header_len = pre.u32();
    if (header_len > crc_offset - kPreambleBytes)
        throw CorruptionError(std::string(kind) + " header length exceeds file", 8);
    try {
        o.header = nlohmann::json::parse(pre.str(header_len));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string(kind) + " header is not valid JSON: " + e.what(), kPreambleBytes);
    }
    o.body_offset = pre.offset();
    o.body_end = crc_offset;
    return o;
}

void write_galaxy(ByteWriter& w, const GalaxyModel& g) {
    w.u8(static_cast<std::uint8_t>(g.profile));
    w.f64(g.flux);
    w.f64(g.half_light_radius);
    w.f64(g.q);
    w.f64(g.theta);
    w.f64(g.x);
    w.f64(g.y);
}

GalaxyModel read_galaxy(ByteReader& r) {
    GalaxyModel g;
    const std::size_t at = r.offset();
    const std::uint8_t profile = r.u8();
    if (profile > 1) throw CorruptionError("unknown galaxy profile code", at);
    g.profile = static_cast<Profile>(profile);
    g.flux = r.f64();
    g.half_light_radius = r.f64();
    g.q = r.f64();
    g.theta = r.f64();
    g.x = r.f64();
    g.y = r.f64();
    return g;
}

void write_tensor(ByteWriter& w, const NamedTensor& t) {
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.str(t.name);
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    w.f32s(t.data);
}

NamedTensor read_tensor(ByteReader& r) {
    NamedTensor t;
    t.name = r.str(r.u16());
    const std::size_t at = r.offset();
    const std::uint8_t ndim = r.u8();
    std::size_t n = 1;
    for (int i = 0; i < ndim; ++i) {
        t.shape.push_back(r.u64());
        n *= t.shape.back();
    }
    if (n * 4 > r.remaining()) throw CorruptionError("tensor '" + t.name + "' larger than file", at);
    r.f32s(t.data, n);
    return t;
}

}  // namespace

std::uint64_t crc64(std::span<const std::uint8_t> bytes) {
    Crc64 crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

std::uint64_t crc64(std::string_view bytes) {
    Crc64 crc;
    crc.process_bytes(bytes.data(), bytes.size());
    return crc.checksum();
}

std::string content_hash(std::string_view bytes) {
    unsigned char digest[SHA256_DIGEST_LENGTH];
    SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string s(2 * SHA256_DIGEST_LENGTH, '0');
    for (int i = 0; i < SHA256_DIGEST_LENGTH; ++i) {
        s[2 * i] = kHex[digest[i] >> 4];
        s[2 * i + 1] = kHex[digest[i] & 0xf];
    }
    return s;
}

std::string file_content_hash(const std::filesystem::path& path) { return content_hash(slurp(path)); }

// ---------------------------------------------------------------- datasets

std::string write_dataset(const Dataset& ds, const std::filesystem::path& path) {
    const auto& h = ds.header;
    if (h.count != ds.records.size()) throw UsageError("dataset header count does not match records");
    const std::size_t pixels = static_cast<std::size_t>(h.height) * h.width;
    ByteWriter body;
    body.buffer().reserve(ds.records.size() * (pixels * 4 * (h.has_noisy ? 2 : 1) + 200));
    for (const auto& rec : ds.records) {
        if (rec.clean.size() != pixels || (h.has_noisy ? rec.noisy.size() != pixels : !rec.noisy.empty()))
            throw UsageError("dataset record pixel count does not match header");
        if (rec.scene.companions.size() != rec.n_companions)
            throw UsageError("dataset record companion count does not match scene");
        body.f64(rec.label.e1);
        body.f64(rec.label.e2);
        body.u8(rec.is_blend ? 1 : 0);
        body.u8(rec.n_companions);
        body.u64(rec.scene.seed);
        body.u8(rec.scene.noise.poisson ? 1 : 0);
        body.f64(rec.scene.noise.sky_level);
        body.u64(rec.scene.noise.seed);
        write_galaxy(body, rec.scene.central);
        for (const auto& g : rec.scene.companions) write_galaxy(body, g);
        body.f32s(rec.clean);
        if (h.has_noisy) body.f32s(rec.noisy);
    }
    nlohmann::json header = {
        {"height", h.height},
        {"width", h.width},
        {"count", h.count},
        {"category", std::string(to_string(h.category))},
        {"sim_config_hash", h.sim_config_hash},
        {"base_seed", h.base_seed},
        {"has_noisy", h.has_noisy},
        {"config_hash", h.config_hash},
    };
    return atomic_write(path, finish("GSDS", kDatasetVersion, header, body.buffer()));
}

Dataset read_dataset(const std::filesystem::path& path) {
    Opened o = open_container(path, "GSDS", kDatasetVersion, "dataset");
    Dataset ds;
    try {
        auto& h = ds.header;
        h.height = o.header.at("height").get<int>();
        h.width = o.header.at("width").get<int>();
        h.count = o.header.at("count").get<std::uint64_t>();
        h.category = category_from_string(o.header.at("category").get<std::string>());
        h.sim_config_hash = o.header.at("sim_config_hash").get<std::string>();
        h.base_seed = o.header.at("base_seed").get<std::uint64_t>();
        h.has_noisy = o.header.at("has_noisy").get<bool>();
        h.config_hash = o.header.value("config_hash", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("dataset header missing fields: ") + e.what(), kPreambleBytes);
    }
    const auto& h = ds.header;
    if (h.height <= 0 || h.width <= 0) throw CorruptionError("dataset header has invalid dimensions", kPreambleBytes);
    const std::size_t pixels = static_cast<std::size_t>(h.height) * h.width;
    ByteReader r(o.bytes, o.body_end);
    r.str(o.body_offset);
    ds.records.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(h.count, 1u << 24)));
    for (std::uint64_t i = 0; i < h.count; ++i) {
        DatasetRecord rec;
        rec.label.e1 = r.f64();
        rec.label.e2 = r.f64();
        rec.is_blend = r.u8() != 0;
        const std::size_t at = r.offset();
        rec.n_companions = r.u8();
        if (rec.n_companions > 5) throw CorruptionError("companion count exceeds 5", at);
        rec.scene.seed = r.u64();
        rec.scene.noise.poisson = r.u8() != 0;
        rec.scene.noise.sky_level = r.f64();
        rec.scene.noise.seed = r.u64();
        rec.scene.central = read_galaxy(r);
        for (int c = 0; c < rec.n_companions; ++c) rec.scene.companions.push_back(read_galaxy(r));
        rec.scene.label = rec.label;
        r.f32s(rec.clean, pixels);
        if (h.has_noisy) r.f32s(rec.noisy, pixels);
        ds.records.push_back(std::move(rec));
    }
    if (r.remaining() != 0) throw CorruptionError("trailing bytes after last dataset record", r.offset());
    return ds;
}

// ------------------------------------------------------------------ models

std::string write_model(const ModelFile& m, const std::filesystem::path& path) {
    ByteWriter body;
    body.u32(static_cast<std::uint32_t>(m.tensors.size()));
    for (const auto& t : m.tensors) write_tensor(body, t);
    body.u32(static_cast<std::uint32_t>(m.optimizer.size()));
    for (const auto& t : m.optimizer) write_tensor(body, t);
    nlohmann::json header = {
        {"architecture", m.architecture},
        {"training", m.training},
        {"manifest_hash", m.manifest_hash},
    };
    return atomic_write(path, finish("GSMD", kModelVersion, header, body.buffer()));
}

ModelFile read_model(const std::filesystem::path& path) {
    Opened o = open_container(path, "GSMD", kModelVersion, "model");
    ModelFile m;
    try {
        m.architecture = o.header.at("architecture");
        m.training = o.header.at("training");
        m.manifest_hash = o.header.at("manifest_hash").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("model header missing fields: ") + e.what(), kPreambleBytes);
    }
    ByteReader r(o.bytes, o.body_end);
    r.str(o.body_offset);
    const std::uint32_t n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) m.tensors.push_back(read_tensor(r));
    const std::uint32_t n_opt = r.u32();
    for (std::uint32_t i = 0; i < n_opt; ++i) m.optimizer.push_back(read_tensor(r));
    if (r.remaining() != 0) throw CorruptionError("trailing bytes after model tensors", r.offset());
    return m;
}

// ------------------------------------------------------------- predictions

std::string write_predictions(const PredictionFile& p, const std::filesystem::path& path) {
    ByteWriter body;
    body.u64(p.records.size());
    for (const auto& rec : p.records) {
        if (rec.raw.size() != static_cast<std::size_t>(rec.k) * 5)
            throw UsageError("prediction record raw output count must be 5*K");
        body.u64(rec.record_index);
        body.u32(rec.k);
        body.u64(rec.base_seed);
        for (double v : rec.raw) body.f64(v);
        body.f64(rec.mu_bar.x);
        body.f64(rec.mu_bar.y);
        for (const Sym2* s : {&rec.sigma_aleat, &rec.sigma_epist, &rec.sigma_pred}) {
            body.f64(s->xx);
            body.f64(s->xy);
            body.f64(s->yy);
        }
        body.f64(rec.u_aleat);
        body.f64(rec.u_epist);
        body.f64(rec.u_pred);
    }
    return atomic_write(path, finish("GSPR", kPredictionVersion, p.header, body.buffer()));
}

PredictionFile read_predictions(const std::filesystem::path& path) {
    Opened o = open_container(path, "GSPR", kPredictionVersion, "prediction");
    PredictionFile p;
    p.header = o.header;
    ByteReader r(o.bytes, o.body_end);
    r.str(o.body_offset);
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
        PredictionRecord rec;
        rec.record_index = r.u64();
        const std::size_t at = r.offset();
        rec.k = r.u32();
        if (static_cast<std::uint64_t>(rec.k) * 40 > r.remaining())
            throw CorruptionError("prediction sample count larger than file", at);
        rec.base_seed = r.u64();
        rec.raw.resize(static_cast<std::size_t>(rec.k) * 5);
        for (auto& v : rec.raw) v = r.f64();
        rec.mu_bar.x = r.f64();
        rec.mu_bar.y = r.f64();
        for (Sym2* s : {&rec.sigma_aleat, &rec.sigma_epist, &rec.sigma_pred}) {
            s->xx = r.f64();
            s->xy = r.f64();
            s->yy = r.f64();
        }
        rec.u_aleat = r.f64();
        rec.u_epist = r.f64();
        rec.u_pred = r.f64();
        p.records.push_back(std::move(rec));
    }
    if (r.remaining() != 0) throw CorruptionError("trailing bytes after last prediction record", r.offset());
    return p;
}

}  // namespace galbnn

#include "stan/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>

namespace stan {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'A', 'N', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
public:
    explicit Writer(const std::string& path)
        : out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_)
            throw Error("checkpoint: cannot open " + path + " for writing");
    }

    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p),
                   static_cast<std::streamsize>(n));
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    void finish(const std::string& path) {
        out_.flush();
        if (!out_) throw Error("checkpoint: write failed for " + path);
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::string& path)
        : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw Error("checkpoint: cannot open " + path);
    }

    std::size_t offset() const { return offset_; }

    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw ParseError("checkpoint: truncated file " + path_, offset_);
        offset_ += n;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(u8()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(u8()) << (8 * i);
        return v;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string str() {
        const std::uint64_t n = u64();
        if (n > (1u << 20))
            throw ParseError("checkpoint: implausible string length " +
                                 std::to_string(n) + " in " + path_,
                             offset_);
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }

private:
    std::ifstream in_;
    std::string path_;
    std::size_t offset_ = 0;
};

void write_model_cfg(Writer& w, const StanConfig& c) {
    w.i64(c.M);
    w.i64(c.H);
    w.i64(c.n);
    w.i64(c.T);
    w.i64(c.spatial_dim);
    w.i64(c.temporal_dim);
    w.i64(c.kernel);
    w.u8(c.use_spatial ? 1 : 0);
    w.u8(c.use_temporal ? 1 : 0);
}

StanConfig read_model_cfg(Reader& r) {
    StanConfig c;
    c.M = r.i64();
    c.H = r.i64();
    c.n = r.i64();
    c.T = r.i64();
    c.spatial_dim = r.i64();
    c.temporal_dim = r.i64();
    c.kernel = r.i64();
    c.use_spatial = r.u8() != 0;
    c.use_temporal = r.u8() != 0;
    return c;
}

void write_disc_cfg(Writer& w, const DiscriminatorConfig& c) {
    w.i64(c.spatial_kernel);
    w.i64(c.temporal_kernel);
    w.i64(c.spatial_filters);
    w.i64(c.temporal_filters);
    w.i64(c.spatial_pool);
    w.i64(c.temporal_pool);
    w.i64(c.feature_dim);
    w.i64(c.fc_units);
    w.f64(c.dropout_p);
    w.f64(c.lambda_gp);
    w.f64(c.drift_eps);
    w.u8(c.sum_fusion ? 1 : 0);
}

DiscriminatorConfig read_disc_cfg(Reader& r) {
    DiscriminatorConfig c;
    c.spatial_kernel = r.i64();
    c.temporal_kernel = r.i64();
    c.spatial_filters = r.i64();
    c.temporal_filters = r.i64();
    c.spatial_pool = r.i64();
    c.temporal_pool = r.i64();
    c.feature_dim = r.i64();
    c.fc_units = r.i64();
    c.dropout_p = r.f64();
    c.lambda_gp = r.f64();
    c.drift_eps = r.f64();
    c.sum_fusion = r.u8() != 0;
    return c;
}

void write_blob(Writer& w, const std::string& name, const nd::Tensor& t) {
    w.str(name);
    w.u64(t.shape().size());
    for (std::int64_t d : t.shape()) w.i64(d);
    for (double v : t.values()) w.f64(v);
}

template <typename Visitable>
void write_section(Writer& w, Visitable& params) {
    std::uint64_t count = 0;
    visit_params(params, [&](const std::string&, nd::Tensor&) { ++count; });
    w.u64(count);
    visit_params(params, [&](const std::string& name, nd::Tensor& t) {
        write_blob(w, name, t);
    });
}

template <typename Visitable>
void read_section(Reader& r, Visitable& params, const std::string& section) {
    const std::uint64_t count = r.u64();
    std::uint64_t expect = 0;
    visit_params(params, [&](const std::string&, nd::Tensor&) { ++expect; });
    if (count != expect)
        throw ParseError("checkpoint: section " + section + " holds " +
                             std::to_string(count) + " blobs, config implies " +
                             std::to_string(expect),
                         r.offset());
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        const std::uint64_t ndim = r.u64();
        nd::Shape shape(ndim);
        for (std::uint64_t d = 0; d < ndim; ++d)
            shape[d] = r.i64();
        bool placed = false;
        visit_params(params, [&](const std::string& pname, nd::Tensor& t) {
            if (pname != name) return;
            if (t.shape() != shape)
                throw ParseError("checkpoint: blob " + name + " has shape " +
                                     nd::shape_str(shape) + ", expected " +
                                     nd::shape_str(t.shape()),
                                 r.offset());
            for (std::int64_t j = 0; j < t.numel(); ++j) t.data()[j] = r.f64();
            placed = true;
        });
        if (!placed)
            throw ParseError("checkpoint: unknown blob " + name + " in " +
                                 section,
                             r.offset());
    }
}

}  // namespace

void save_checkpoint(const std::string& path, Checkpoint& ck) {
    Writer w(path);
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kVersion);
    write_model_cfg(w, ck.model_cfg);
    write_disc_cfg(w, ck.disc_cfg);
    w.u8(ck.has_disc ? 1 : 0);
    w.u8(ck.has_norm ? 1 : 0);
    write_section(w, ck.backbone);
    if (ck.has_disc) write_section(w, ck.disc);
    if (ck.has_norm) {
        w.u64(ck.norm_mean.size());
        for (double v : ck.norm_mean) w.f64(v);
        for (double v : ck.norm_std) w.f64(v);
    }
    w.finish(path);
}

Checkpoint load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[8];
    r.bytes(magic, sizeof magic);
    for (int i = 0; i < 8; ++i)
        if (magic[i] != kMagic[i])
            throw UnsupportedFormatError("checkpoint: bad magic in " + path);
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw UnsupportedFormatError("checkpoint: version " +
                                     std::to_string(version) +
                                     " unsupported (expected " +
                                     std::to_string(kVersion) + ")");
    Checkpoint ck;
    ck.model_cfg = read_model_cfg(r);
    ck.disc_cfg = read_disc_cfg(r);
    ck.has_disc = r.u8() != 0;
    ck.has_norm = r.u8() != 0;

    nd::Rng scratch(0);
    ck.backbone = make_stan_params(ck.model_cfg, scratch);
    read_section(r, ck.backbone, "backbone");
    if (ck.has_disc) {
        ck.disc = make_disc_params(ck.disc_cfg, ck.model_cfg, scratch);
        read_section(r, ck.disc, "discriminator");
    }
    if (ck.has_norm) {
        const std::uint64_t n = r.u64();
        if (n != static_cast<std::uint64_t>(ck.model_cfg.n))
            throw ParseError("checkpoint: normalization holds " +
                                 std::to_string(n) + " channels, config has " +
                                 std::to_string(ck.model_cfg.n),
                             r.offset());
        ck.norm_mean.resize(n);
        ck.norm_std.resize(n);
        for (double& v : ck.norm_mean) v = r.f64();
        for (double& v : ck.norm_std) v = r.f64();
    }
    return ck;
}

}  // namespace stan

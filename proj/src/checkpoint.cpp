#include "dualinc/checkpoint.hpp"

#include "dualinc/config.hpp"
#include "dualinc/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace dualinc::checkpoint {

using ad::Tensor;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint layout assumes little-endian");

constexpr char kModelMagic[8] = {'D', 'I', 'N', 'C', 'M', 'O', 'D', 'L'};
constexpr char kStateMagic[8] = {'D', 'I', 'N', 'C', 'S', 'T', 'A', 'T'};

class Writer {
public:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void u8(std::uint8_t v) { raw(&v, 1); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }
    void i64(std::int64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
    void doubles(std::span<const double> v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(double));
    }
    void tensor(const Tensor& t) {
        u8(t.defined() ? 1 : 0);
        if (!t.defined()) return;
        u64(t.rows());
        u64(t.cols());
        raw(t.data().data(), t.size() * sizeof(double));
    }
    std::vector<std::uint8_t> finish() {
        u64(fnv1a64(buf_, kFnvOffset));
        return std::move(buf_);
    }

private:
    std::vector<std::uint8_t> buf_;
};

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    void raw(void* p, std::size_t n) {
        if (n > end_ - pos_) throw CorruptFileError("checkpoint: unexpected end of data");
        std::memcpy(p, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::uint8_t u8() { std::uint8_t v; raw(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; raw(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; raw(&v, 8); return v; }
    std::int64_t i64() { std::int64_t v; raw(&v, 8); return v; }
    double f64() { double v; raw(&v, 8); return v; }
    std::size_t count(std::size_t elem) {
        const std::uint64_t n = u64();
        if (elem > 0 && n > (end_ - pos_) / elem) throw CorruptFileError("checkpoint: length field out of range");
        return static_cast<std::size_t>(n);
    }
    std::string str() {
        std::string s(count(1), '\0');
        raw(s.data(), s.size());
        return s;
    }
    std::vector<double> doubles() {
        std::vector<double> v(count(sizeof(double)));
        raw(v.data(), v.size() * sizeof(double));
        return v;
    }
    Tensor tensor() {
        const std::uint8_t defined = u8();
        if (defined > 1) throw CorruptFileError("checkpoint: bad tensor flag");
        if (!defined) return {};
        const std::uint64_t r = u64();
        const std::uint64_t c = u64();
        if (r == 0 || c == 0 || r > (end_ - pos_) || c > (end_ - pos_) / sizeof(double) / r) {
            throw CorruptFileError("checkpoint: tensor shape out of range");
        }
        std::vector<double> v(r * c);
        raw(v.data(), v.size() * sizeof(double));
        return Tensor::from({r, c}, std::move(v));
    }
    bool done() const { return pos_ == end_; }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

// Validates magic, version and digest; returns a reader over the payload.
Reader open(const std::vector<std::uint8_t>& bytes, const char (&magic)[8], std::uint32_t version,
            const char* what) {
    if (bytes.size() < 8 + 4 + 8) throw CorruptFileError(std::string(what) + ": file too short");
    if (std::memcmp(bytes.data(), magic, 8) != 0) {
        throw CorruptFileError(std::string(what) + ": bad magic");
    }
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + 8, 4);
    if (v != version) {
        throw VersionMismatchError(std::string(what) + ": format version " + std::to_string(v) +
                                   ", expected " + std::to_string(version));
    }
    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + body, 8);
    if (fnv1a64(std::span(bytes.data(), body), kFnvOffset) != stored) {
        throw CorruptFileError(std::string(what) + ": digest mismatch");
    }
    Reader r(bytes, body);
    char skip[12];
    r.raw(skip, 12);
    return r;
}

void write_model_body(Writer& w, const model::ToyModel& m) {
    const auto& c = m.config;
    for (std::size_t v : {c.vocab_size, c.dim, c.layers, c.heads, c.max_seq_len, c.feature_dim}) w.u64(v);
    w.u64(m.seed);
    const auto weights = m.named_weights();
    w.u64(weights.size());
    for (const auto& [name, t] : weights) {
        w.str(name);
        w.tensor(t);
    }
}

model::ToyModel read_model_body(Reader& r) {
    model::ToyModelConfig c;
    c.vocab_size = r.u64();
    c.dim = r.u64();
    c.layers = r.u64();
    c.heads = r.u64();
    c.max_seq_len = r.u64();
    c.feature_dim = r.u64();
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw CorruptFileError(std::string("checkpoint: model config: ") + e.what());
    }
    if (c.vocab_size > 1 << 20 || c.dim > 1 << 12 || c.layers > 64 || c.max_seq_len > 1 << 16 ||
        c.feature_dim > 1 << 12) {
        throw CorruptFileError("checkpoint: model config out of range");
    }
    const std::uint64_t seed = r.u64();
    model::ToyModel m = model::ToyModel::init(c, seed);
    const auto weights = m.named_weights();
    if (r.u64() != weights.size()) throw CorruptFileError("checkpoint: weight count mismatch");
    for (const auto& [name, t] : weights) {
        if (r.str() != name) throw CorruptFileError("checkpoint: unexpected weight '" + name + "'");
        const Tensor loaded = r.tensor();
        if (!loaded.defined() || loaded.shape() != t.shape()) {
            throw CorruptFileError("checkpoint: weight '" + name + "' has the wrong shape");
        }
        Tensor dst = t;
        std::copy(loaded.data().begin(), loaded.data().end(), dst.mutable_data().begin());
    }
    return m;
}

void write_instance(Writer& w, const stream::InstructionInstance& inst) {
    w.doubles(inst.features);
    w.str(inst.instruction);
    w.str(inst.response);
}

stream::InstructionInstance read_instance(Reader& r) {
    stream::InstructionInstance inst;
    inst.features = r.doubles();
    inst.instruction = r.str();
    inst.response = r.str();
    return inst;
}

Tensor require(Tensor t, ad::Shape shape, const char* what) {
    if (!t.defined() || t.shape() != shape) {
        throw CorruptFileError(std::string("checkpoint: ") + what + " has the wrong shape");
    }
    return t;
}

}  // namespace

std::vector<std::uint8_t> serialize_model(const model::ToyModel& m) {
    Writer w;
    w.raw(kModelMagic, 8);
    w.u32(kModelVersion);
    write_model_body(w, m);
    return w.finish();
}

model::ToyModel deserialize_model(const std::vector<std::uint8_t>& bytes) {
    Reader r = open(bytes, kModelMagic, kModelVersion, "model checkpoint");
    model::ToyModel m = read_model_body(r);
    if (!r.done()) throw CorruptFileError("model checkpoint: trailing bytes");
    return m;
}

std::vector<std::uint8_t> serialize_state(const engine::TrainedState& s) {
    Writer w;
    w.raw(kStateMagic, 8);
    w.u32(kStateVersion);
    w.str(config::to_json(s.config).dump());

    w.u64(s.encoder->embed_dim());
    w.u64(s.encoder->feature_dim());
    w.u64(s.encoder->seed());
    w.u64(s.encoder->table_digest());

    write_model_body(w, s.model);

    w.u64(s.pools.size());
    for (const auto& p : s.pools) {
        const auto& d = p.dims();
        for (std::size_t v : {d.pool_size, d.dim, d.rank, d.key_dim}) w.u64(v);
        w.u64(p.seed());
        w.u8(p.low_rank() ? 1 : 0);
        for (std::size_t n = 0; n < p.size(); ++n) {
            const auto& pair = p.pair(n);
            w.tensor(pair.key);
            if (p.low_rank()) {
                w.tensor(pair.factor_a);
                w.tensor(pair.factor_b);
            } else {
                w.tensor(pair.full);
            }
        }
    }

    w.u64(s.traces.size());
    for (const auto& traces : s.traces) {
        w.u64(traces.size());
        for (const auto& t : traces) {
            w.i64(t.task_id);
            w.u8(t.frozen ? 1 : 0);
            w.u8(t.weighting == pool::TraceWeighting::frequency ? 1 : 0);
            w.u64(t.selections.size());
            for (const auto& [n, count] : t.selections) {
                w.u64(n);
                w.u64(count);
            }
            w.tensor(t.running_avg);
            w.tensor(t.snapshot_avg);
        }
    }

    w.tensor(s.context.raw);

    w.u64(s.buffer.capacity);
    w.u64(s.buffer.seen);
    w.u64(s.buffer.items.size());
    for (const auto& inst : s.buffer.items) write_instance(w, inst);

    w.u64(s.task_names.size());
    for (const auto& name : s.task_names) w.str(name);
    w.u64(s.trainable_count);
    return w.finish();
}

engine::TrainedState deserialize_state(const std::vector<std::uint8_t>& bytes) {
    Reader r = open(bytes, kStateMagic, kStateVersion, "state checkpoint");
    engine::TrainedState s;
    try {
        s.config = config::run_config_from_json(nlohmann::json::parse(r.str()));
    } catch (const nlohmann::json::exception& e) {
        throw CorruptFileError(std::string("state checkpoint: config: ") + e.what());
    }

    const std::uint64_t embed_dim = r.u64();
    const std::uint64_t feature_dim = r.u64();
    const std::uint64_t enc_seed = r.u64();
    const std::uint64_t digest = r.u64();
    if (embed_dim == 0 || embed_dim > 1 << 12 || feature_dim > 1 << 12) {
        throw CorruptFileError("state checkpoint: encoder dims out of range");
    }
    auto encoder = std::make_shared<const SurrogateEncoder>(embed_dim, enc_seed, feature_dim);
    if (encoder->table_digest() != digest) {
        throw IntegrityError("state checkpoint: encoder table does not match the recorded digest");
    }
    s.encoder = std::move(encoder);

    s.model = read_model_body(r);

    const std::size_t n_pools = r.count(8);
    for (std::size_t p = 0; p < n_pools; ++p) {
        pool::PoolDims d;
        d.pool_size = r.u64();
        d.dim = r.u64();
        d.rank = r.u64();
        d.key_dim = r.u64();
        if (d.pool_size == 0 || d.pool_size > 1 << 16 || d.dim == 0 || d.dim > 1 << 12 ||
            d.rank == 0 || d.rank > d.dim || d.key_dim == 0 || d.key_dim > 1 << 12) {
            throw CorruptFileError("state checkpoint: pool dims out of range");
        }
        const std::uint64_t seed = r.u64();
        const std::uint8_t low_rank = r.u8();
        if (low_rank > 1) throw CorruptFileError("state checkpoint: bad low-rank flag");
        std::vector<pool::ProxyIncrementPair> pairs(d.pool_size);
        for (auto& pair : pairs) {
            pair.key = require(r.tensor(), {1, d.key_dim}, "key");
            if (low_rank) {
                pair.factor_a = require(r.tensor(), {d.dim, d.rank}, "factor A");
                pair.factor_b = require(r.tensor(), {d.rank, d.dim}, "factor B");
            } else {
                pair.full = require(r.tensor(), {d.dim, d.dim}, "dense increment");
            }
        }
        s.pools.push_back(pool::LowRankPool::from_parts(d, seed, low_rank == 1, std::move(pairs)));
    }

    const std::size_t n_trace_lists = r.count(8);
    s.traces.resize(n_trace_lists);
    for (auto& traces : s.traces) {
        const std::size_t n = r.count(8);
        for (std::size_t i = 0; i < n; ++i) {
            pool::TaskTrace t;
            t.task_id = static_cast<int>(r.i64());
            const std::uint8_t frozen = r.u8();
            const std::uint8_t weighting = r.u8();
            if (frozen > 1 || weighting > 1) throw CorruptFileError("state checkpoint: bad trace flags");
            t.frozen = frozen == 1;
            t.weighting = weighting ? pool::TraceWeighting::frequency : pool::TraceWeighting::uniform;
            const std::size_t n_sel = r.count(16);
            for (std::size_t k = 0; k < n_sel; ++k) {
                const std::uint64_t idx = r.u64();
                t.selections[idx] = r.u64();
            }
            t.running_avg = r.tensor();
            t.snapshot_avg = r.tensor();
            if (!t.running_avg.defined() || (t.frozen && !t.snapshot_avg.defined())) {
                throw CorruptFileError("state checkpoint: trace without averages");
            }
            traces.push_back(std::move(t));
        }
    }

    s.context.raw = r.tensor();

    s.buffer.capacity = r.u64();
    s.buffer.seen = r.u64();
    const std::size_t n_items = r.count(24);
    for (std::size_t i = 0; i < n_items; ++i) s.buffer.items.push_back(read_instance(r));

    const std::size_t n_names = r.count(8);
    for (std::size_t i = 0; i < n_names; ++i) s.task_names.push_back(r.str());
    s.trainable_count = r.u64();
    if (!r.done()) throw CorruptFileError("state checkpoint: trailing bytes");
    return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write '" + tmp.string() + "'");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw DataError("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

void save_model(const model::ToyModel& m, const std::filesystem::path& path) {
    write_file(path, serialize_model(m));
}

model::ToyModel load_model(const std::filesystem::path& path) { return deserialize_model(read_file(path)); }

void save_state(const engine::TrainedState& s, const std::filesystem::path& path) {
    write_file(path, serialize_state(s));
}

engine::TrainedState load_state(const std::filesystem::path& path) {
    return deserialize_state(read_file(path));
}

}  // namespace dualinc::checkpoint

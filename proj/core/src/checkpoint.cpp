#include "smmini/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "smmini/error.hpp"
#include "smmini/rng.hpp"

namespace smmini {

namespace {

using nlohmann::json;

enum class DType : std::uint8_t {
    f64 = 0,
    q4 = 1,
};

json config_json(const Checkpoint& c) {
    const ModelConfig& m = c.params.config;
    const TrainConfig& t = c.train_config;
    return json{
        {"model",
         {{"vocab_size", m.vocab_size},
          {"d_model", m.d_model},
          {"n_heads", m.n_heads},
          {"n_layers", m.n_layers},
          {"d_ff", m.d_ff},
          {"max_sequence_length", m.max_sequence_length},
          {"lora_r", m.lora_r},
          {"lora_alpha", m.lora_alpha},
          {"lora_dropout", m.lora_dropout},
          {"lora_target", std::string(to_string(m.lora_target))},
          {"init_std", m.init_std}}},
        {"train",
         {{"sequence_length", t.sequence_length},
          {"grad_accumulation_steps", t.grad_accumulation_steps},
          {"minibatch_size", t.minibatch_size},
          {"epochs", t.epochs},
          {"optimizer", std::string(to_string(t.optimizer))},
          {"lr_schedule", std::string(to_string(t.lr_schedule))},
          {"learning_rate", t.learning_rate},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"eps", t.eps},
          {"weight_decay", t.weight_decay},
          {"grad_clip", t.grad_clip},
          {"answer_only_loss", t.answer_only_loss},
          {"max_steps", t.max_steps},
          {"seed", t.seed},
          {"threads", t.threads}}},
        {"step", c.step},
        {"rng_seed", c.rng_seed},
    };
}

void write_f64_tensor(std::ostream& out, const std::string& name, const Matrix& m) {
    detail::put_string(out, name);
    detail::put_u8(out, static_cast<std::uint8_t>(DType::f64));
    detail::put_u32(out, 2);
    detail::put_u64(out, m.rows());
    detail::put_u64(out, m.cols());
    for (double v : m.values()) {
        detail::put_f64(out, v);
    }
}

void write_q4_tensor(std::ostream& out, const std::string& name, const QuantizedTensor& q) {
    detail::put_string(out, name);
    detail::put_u8(out, static_cast<std::uint8_t>(DType::q4));
    detail::put_u32(out, 2);
    detail::put_u64(out, q.rows);
    detail::put_u64(out, q.cols);
    write_quantized(out, q);
}

Matrix row_matrix(const std::vector<double>& v) {
    Matrix m(1, v.size());
    std::copy(v.begin(), v.end(), m.values().begin());
    return m;
}

struct TensorEntry {
    DType dtype = DType::f64;
    Matrix dense;
    QuantizedTensor quantized;
};

[[noreturn]] void corrupt(const std::string& what) {
    throw Error(ErrorKind::checkpoint, what);
}

// Collects tensor sections by name; `take` removes an entry so leftovers can be rejected.
class TensorTable {
public:
    void add(std::string name, TensorEntry entry) {
        if (!entries_.emplace(std::move(name), std::move(entry)).second) {
            corrupt("duplicate tensor section");
        }
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Matrix take_dense(const std::string& name, std::size_t rows, std::size_t cols) {
        auto e = take(name);
        if (e.dtype != DType::f64) {
            corrupt("tensor " + name + " must be f64");
        }
        check_shape(name, e.dense.rows(), e.dense.cols(), rows, cols);
        return std::move(e.dense);
    }

    std::vector<double> take_vector(const std::string& name, std::size_t n) {
        const Matrix m = take_dense(name, 1, n);
        return {m.values().begin(), m.values().end()};
    }

    void take_linear(const std::string& name, Linear& lin, std::size_t rows, std::size_t cols) {
        auto e = take(name);
        if (e.dtype == DType::q4) {
            check_shape(name, e.quantized.rows, e.quantized.cols, rows, cols);
            lin.weight = dequantize(e.quantized);
            lin.packed = std::move(e.quantized);
        } else {
            check_shape(name, e.dense.rows(), e.dense.cols(), rows, cols);
            lin.weight = std::move(e.dense);
            lin.packed.reset();
        }
    }

    bool empty() const { return entries_.empty(); }
    std::string first_name() const { return entries_.begin()->first; }

private:
    TensorEntry take(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) {
            corrupt("missing tensor " + name);
        }
        TensorEntry e = std::move(it->second);
        entries_.erase(it);
        return e;
    }

    static void check_shape(const std::string& name, std::size_t r, std::size_t c, std::size_t er, std::size_t ec) {
        if (r != er || c != ec) {
            corrupt("tensor " + name + " has shape " + std::to_string(r) + "x" + std::to_string(c) + ", expected " +
                    std::to_string(er) + "x" + std::to_string(ec));
        }
    }

    std::map<std::string, TensorEntry> entries_;
};

template <class T>
T get_field(const json& obj, const char* key) {
    const auto it = obj.find(key);
    if (it == obj.end()) {
        corrupt(std::string("config is missing '") + key + "'");
    }
    return it->get<T>();
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
    std::ostringstream body(std::ios::binary);
    body.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
    detail::put_u8(body, kCheckpointVersion);
    const std::string cfg = config_json(ckpt).dump();
    detail::put_u64(body, cfg.size());
    body.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

    const Parameters& p = ckpt.params;
    std::ostringstream tensors(std::ios::binary);
    std::uint32_t count = 0;
    auto dense = [&](const std::string& name, const Matrix& m) {
        write_f64_tensor(tensors, name, m);
        ++count;
    };
    dense("token_embedding", p.token_embedding);
    dense("position_embedding", p.position_embedding);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        dense(prefix + "attn_norm", row_matrix(p.layers[l].attn_norm));
        dense(prefix + "mlp_norm", row_matrix(p.layers[l].mlp_norm));
    }
    dense("final_norm", row_matrix(p.final_norm));

    const auto names = p.linear_names();
    const auto lins = p.linears();
    for (std::size_t i = 0; i < lins.size(); ++i) {
        if (lins[i]->packed) {
            write_q4_tensor(tensors, names[i] + ".weight", *lins[i]->packed);
            ++count;
        } else {
            dense(names[i] + ".weight", lins[i]->weight);
        }
        if (lins[i]->adapter) {
            dense(names[i] + ".lora_a", lins[i]->adapter->a);
            dense(names[i] + ".lora_b", lins[i]->adapter->b);
        }
    }
    const auto trainable = p.trainable_names();
    if (ckpt.optimizer.m.size() != trainable.size() || ckpt.optimizer.v.size() != trainable.size()) {
        throw Error(ErrorKind::checkpoint, "optimizer state does not mirror the trainable set");
    }
    for (std::size_t i = 0; i < trainable.size(); ++i) {
        dense("optim.m." + trainable[i], ckpt.optimizer.m[i]);
        dense("optim.v." + trainable[i], ckpt.optimizer.v[i]);
    }

    detail::put_u32(body, count);
    body << tensors.str();
    const std::string bytes = body.str();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    detail::put_u64(out, fnv1a64(bytes));
    if (!out) {
        throw Error(ErrorKind::checkpoint, "write failed");
    }
}

Checkpoint read_checkpoint(std::string_view bytes) {
    if (bytes.size() < kCheckpointMagic.size() + 1 + 8) {
        corrupt("file too short");
    }
    if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
        corrupt("bad magic");
    }
    if (static_cast<std::uint8_t>(bytes[kCheckpointMagic.size()]) != kCheckpointVersion) {
        corrupt("unsupported version " + std::to_string(static_cast<int>(bytes[kCheckpointMagic.size()])));
    }
    const std::string_view body = bytes.substr(0, bytes.size() - 8);
    {
        std::istringstream trailer(std::string(bytes.substr(bytes.size() - 8)), std::ios::binary);
        detail::ByteReader r(trailer, ErrorKind::checkpoint);
        if (r.u64() != fnv1a64(body)) {
            corrupt("checksum mismatch (truncated or corrupted file)");
        }
    }

    std::istringstream in(std::string(body.substr(kCheckpointMagic.size() + 1)), std::ios::binary);
    detail::ByteReader r(in, ErrorKind::checkpoint);
    const std::uint64_t cfg_len = r.u64();
    r.check_available(cfg_len);
    json cfg;
    try {
        cfg = json::parse(r.bytes(static_cast<std::size_t>(cfg_len)));
    } catch (const json::exception& e) {
        corrupt(std::string("bad config: ") + e.what());
    }

    Checkpoint c;
    try {
        const json& m = cfg.at("model");
        ModelConfig& mc = c.params.config;
        mc.vocab_size = get_field<int>(m, "vocab_size");
        mc.d_model = get_field<int>(m, "d_model");
        mc.n_heads = get_field<int>(m, "n_heads");
        mc.n_layers = get_field<int>(m, "n_layers");
        mc.d_ff = get_field<int>(m, "d_ff");
        mc.max_sequence_length = get_field<int>(m, "max_sequence_length");
        mc.lora_r = get_field<int>(m, "lora_r");
        mc.lora_alpha = get_field<double>(m, "lora_alpha");
        mc.lora_dropout = get_field<double>(m, "lora_dropout");
        mc.lora_target = parse_lora_target(get_field<std::string>(m, "lora_target"));
        mc.init_std = get_field<double>(m, "init_std");

        const json& t = cfg.at("train");
        TrainConfig& tc = c.train_config;
        tc.sequence_length = get_field<int>(t, "sequence_length");
        tc.grad_accumulation_steps = get_field<int>(t, "grad_accumulation_steps");
        tc.minibatch_size = get_field<int>(t, "minibatch_size");
        tc.epochs = get_field<int>(t, "epochs");
        tc.optimizer = parse_optimizer(get_field<std::string>(t, "optimizer"));
        tc.lr_schedule = parse_lr_schedule(get_field<std::string>(t, "lr_schedule"));
        tc.learning_rate = get_field<double>(t, "learning_rate");
        tc.beta1 = get_field<double>(t, "beta1");
        tc.beta2 = get_field<double>(t, "beta2");
        tc.eps = get_field<double>(t, "eps");
        tc.weight_decay = get_field<double>(t, "weight_decay");
        tc.grad_clip = get_field<double>(t, "grad_clip");
        tc.answer_only_loss = get_field<bool>(t, "answer_only_loss");
        tc.max_steps = get_field<std::int64_t>(t, "max_steps");
        tc.seed = get_field<std::uint64_t>(t, "seed");
        tc.threads = get_field<unsigned>(t, "threads");

        c.step = get_field<std::int64_t>(cfg, "step");
        c.rng_seed = get_field<std::uint64_t>(cfg, "rng_seed");
    } catch (const json::exception& e) {
        corrupt(std::string("bad config: ") + e.what());
    } catch (const Error& e) {
        corrupt(e.what());
    }
    try {
        c.params.config.validate();
    } catch (const Error& e) {
        corrupt(e.what());
    }

    TensorTable table;
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.string();
        const auto dtype = static_cast<DType>(r.u8());
        const std::uint32_t ndim = r.u32();
        if (ndim != 2) {
            corrupt("tensor " + name + " has unsupported rank " + std::to_string(ndim));
        }
        const std::uint64_t rows = r.u64();
        const std::uint64_t cols = r.u64();
        TensorEntry e;
        e.dtype = dtype;
        if (dtype == DType::f64) {
            if (rows != 0 && cols > (std::uint64_t{1} << 40) / rows) {
                corrupt("implausible shape for " + name);
            }
            r.check_available(rows * cols * 8);
            e.dense = Matrix(rows, cols);
            for (double& v : e.dense.values()) {
                v = r.f64();
            }
        } else if (dtype == DType::q4) {
            try {
                e.quantized = read_quantized(in);
            } catch (const Error& err) {
                corrupt("tensor " + name + ": " + err.what());
            }
            if (e.quantized.rows != rows || e.quantized.cols != cols) {
                corrupt("tensor " + name + " header disagrees with its payload");
            }
        } else {
            corrupt("tensor " + name + " has unknown dtype tag");
        }
        table.add(std::move(name), std::move(e));
    }

    const ModelConfig& mc = c.params.config;
    const auto d = static_cast<std::size_t>(mc.d_model);
    const auto ff = static_cast<std::size_t>(mc.d_ff);
    const auto vocab = static_cast<std::size_t>(mc.vocab_size);
    Parameters& p = c.params;
    p.token_embedding = table.take_dense("token_embedding", vocab, d);
    p.position_embedding = table.take_dense("position_embedding", static_cast<std::size_t>(mc.max_sequence_length), d);
    p.layers.resize(static_cast<std::size_t>(mc.n_layers));
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
        const std::string prefix = "layers." + std::to_string(l) + ".";
        p.layers[l].attn_norm = table.take_vector(prefix + "attn_norm", d);
        p.layers[l].mlp_norm = table.take_vector(prefix + "mlp_norm", d);
    }
    p.final_norm = table.take_vector("final_norm", d);

    const auto names = p.linear_names();
    auto lins = p.linears();
    for (std::size_t i = 0; i < lins.size(); ++i) {
        std::size_t rows = d;
        std::size_t cols = d;
        const auto& n = names[i];
        if (n == "head") {
            rows = vocab;
        } else if (n.ends_with(".w_gate") || n.ends_with(".w_up")) {
            rows = ff;
        } else if (n.ends_with(".w_down")) {
            cols = ff;
        }
        table.take_linear(n + ".weight", *lins[i], rows, cols);
        if (table.has(n + ".lora_a")) {
            const auto r_ = static_cast<std::size_t>(mc.lora_r);
            LoraAdapter ad;
            ad.rank = mc.lora_r;
            ad.alpha = mc.lora_alpha;
            ad.dropout = mc.lora_dropout;
            ad.a = table.take_dense(n + ".lora_a", r_, cols);
            ad.b = table.take_dense(n + ".lora_b", rows, r_);
            lins[i]->adapter = std::move(ad);
        }
    }
    const auto trainable = p.trainable_names();
    const auto tensors = p.trainable_tensors();
    c.optimizer.step = c.step;
    for (std::size_t i = 0; i < trainable.size(); ++i) {
        c.optimizer.m.push_back(table.take_dense("optim.m." + trainable[i], tensors[i]->rows(), tensors[i]->cols()));
        c.optimizer.v.push_back(table.take_dense("optim.v." + trainable[i], tensors[i]->rows(), tensors[i]->cols()));
    }
    if (!table.empty()) {
        corrupt("unexpected tensor " + table.first_name());
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        corrupt("trailing bytes after tensor sections");
    }
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ostringstream buf(std::ios::binary);
    write_checkpoint(buf, ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorKind::checkpoint, "cannot write " + path.string());
    }
    const std::string bytes = buf.str();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error(ErrorKind::checkpoint, "write failed for " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::checkpoint, "cannot read " + path.string());
    }
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return read_checkpoint(bytes);
}

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b) {
    std::ostringstream sa(std::ios::binary);
    std::ostringstream sb(std::ios::binary);
    write_checkpoint(sa, a);
    write_checkpoint(sb, b);
    return sa.str() == sb.str();
}

}  // namespace smmini

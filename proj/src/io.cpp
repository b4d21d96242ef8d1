#include "dblend/io.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dblend {

namespace {

constexpr std::size_t magic_len = 6;

void put_u8(std::string& out, std::uint8_t v) { out.push_back(char(v)); }

void put_u16(std::string& out, std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

class Reader {
   public:
    explicit Reader(const std::string& b) : bytes_(b) {}

    std::size_t remaining() const { return bytes_.size() - pos_; }

    void need(std::size_t n, const std::string& what) const {
        require(n <= remaining(), ErrorCode::truncation,
                "file truncated while reading " + what + ": need " + std::to_string(n) + " bytes, " +
                    std::to_string(remaining()) + " left");
    }

    std::uint32_t u(int width, const std::string& what) {
        need(std::size_t(width), what);
        std::uint32_t v = 0;
        for (int i = 0; i < width; ++i) v |= std::uint32_t(std::uint8_t(bytes_[pos_ + std::size_t(i)])) << (8 * i);
        pos_ += std::size_t(width);
        return v;
    }

    std::string take(std::size_t n, const std::string& what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    const char* cursor() const { return bytes_.data() + pos_; }
    void skip(std::size_t n) { pos_ += n; }

   private:
    const std::string& bytes_;
    std::size_t pos_ = 0;
};

std::string exact(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

template <typename T>
T parse_number(const std::string& s, const std::string& what) {
    T v{};
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    require(r.ec == std::errc() && r.ptr == s.data() + s.size(), ErrorCode::malformed,
            "cannot parse " + what + " from '" + s + "'");
    return v;
}

std::uint64_t parse_hex(const std::string& s, const std::string& what) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v, 16);
    require(r.ec == std::errc() && r.ptr == s.data() + s.size(), ErrorCode::malformed,
            "cannot parse " + what + " from '" + s + "'");
    return v;
}

std::string join_ints(const std::vector<int>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
    return s;
}

std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(parse_number<int>(tok, "integer list"));
    return out;
}

}  // namespace

const std::string& Container::get(const std::string& key) const {
    for (const auto& [k, v] : meta)
        if (k == key) return v;
    fail(ErrorCode::malformed, "metadata key '" + key + "' missing");
}

bool Container::has(const std::string& key) const {
    for (const auto& kv : meta)
        if (kv.first == key) return true;
    return false;
}

std::string encode_container(const Container& c, const char* magic) {
    std::string out(magic, magic_len);
    put_u32(out, container_version);
    std::string meta;
    for (const auto& [k, v] : c.meta) {
        require(k.find_first_of("=\n") == std::string::npos && v.find('\n') == std::string::npos,
                ErrorCode::invalid_argument, "metadata entry '" + k + "' contains a separator");
        meta += k + "=" + v + "\n";
    }
    put_u32(out, std::uint32_t(meta.size()));
    out += meta;
    put_u32(out, std::uint32_t(c.tensors.size()));
    for (const auto& [name, t] : c.tensors) {
        require(name.size() <= 0xffff && t.rank() <= 0xff, ErrorCode::invalid_argument, "tensor '" + name + "' too large");
        put_u16(out, std::uint16_t(name.size()));
        out += name;
        put_u8(out, std::uint8_t(t.rank()));
        for (std::size_t d : t.shape()) put_u32(out, std::uint32_t(d));
        for (float v : t.data()) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(out, bits);
        }
    }
    return out;
}

Container decode_container(const std::string& bytes, const char* magic) {
    Reader r(bytes);
    require(bytes.size() >= magic_len && bytes.compare(0, magic_len, magic) == 0, ErrorCode::bad_magic,
            std::string("bad magic: expected ") + magic);
    r.skip(magic_len);
    const std::uint32_t version = r.u(4, "version");
    require(version == container_version, ErrorCode::version_mismatch,
            "unsupported format version " + std::to_string(version) + " (expected " +
                std::to_string(container_version) + ")");
    Container c;
    const std::string meta = r.take(r.u(4, "metadata length"), "metadata");
    std::stringstream ms(meta);
    std::string line;
    while (std::getline(ms, line)) {
        const auto eq = line.find('=');
        require(eq != std::string::npos, ErrorCode::malformed, "metadata line without '=': " + line);
        c.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    const std::uint32_t count = r.u(4, "tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.take(r.u(2, "name length"), "tensor name");
        const std::uint32_t rank = r.u(1, "rank of " + name);
        Shape shape;
        std::uint64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            shape.push_back(r.u(4, "dims of " + name));
            numel *= shape.back();
            require(numel <= r.remaining(), ErrorCode::truncation, "tensor '" + name + "' larger than the file");
        }
        r.need(std::size_t(numel) * 4, "payload of " + name);
        Tensor t(shape);
        const char* p = r.cursor();
        for (std::size_t k = 0; k < t.numel(); ++k) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= std::uint32_t(std::uint8_t(p[4 * k + std::size_t(b)])) << (8 * b);
            std::memcpy(&t[k], &bits, 4);
        }
        r.skip(t.numel() * 4);
        c.tensors.emplace_back(name, std::move(t));
    }
    require(r.remaining() == 0, ErrorCode::malformed, std::to_string(r.remaining()) + " trailing bytes after tensors");
    return c;
}

void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(bool(f), ErrorCode::io, "cannot open " + path.string() + " for writing");
    f.write(bytes.data(), std::streamsize(bytes.size()));
    require(bool(f), ErrorCode::io, "write to " + path.string() + " failed");
}

std::string read_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    require(bool(f), ErrorCode::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    Container c;
    c.meta = {{"finetune_step", std::to_string(ckpt.finetune_step)},
              {"seed", std::to_string(ckpt.seed)},
              {"vocab_hash", hash_hex(ckpt.vocab_hash)},
              {"arch", ckpt.arch.str()}};
    for (const auto& [name, shape] : parameter_layout(ckpt.arch)) c.tensors.emplace_back(name, ckpt.param(name));
    write_file(path, encode_container(c, checkpoint_magic));
}

Checkpoint load_checkpoint(const fs::path& path) {
    const Container c = decode_container(read_file(path), checkpoint_magic);
    Checkpoint ck;
    ck.vocab_hash = parse_hex(c.get("vocab_hash"), "vocab_hash");
    require(ck.vocab_hash == Vocabulary::standard().hash(), ErrorCode::vocab_mismatch,
            path.string() + " was written with vocabulary " + c.get("vocab_hash") + ", this build uses " +
                hash_hex(Vocabulary::standard().hash()));
    ck.finetune_step = parse_number<std::int64_t>(c.get("finetune_step"), "finetune_step");
    ck.seed = parse_number<std::uint64_t>(c.get("seed"), "seed");
    ck.arch = ArchDescriptor::parse(c.get("arch"));
    for (const auto& [name, t] : c.tensors) {
        require(!ck.params.count(name), ErrorCode::malformed, "duplicate tensor '" + name + "'");
        ck.params.emplace(name, t);
    }
    try {
        ck.validate();
    } catch (const Error& e) {
        if (e.code() == ErrorCode::vocab_mismatch) throw;
        fail(ErrorCode::malformed, path.string() + ": " + e.what());
    }
    return ck;
}

void save_attention(const AttentionDump& dump, const fs::path& path) {
    Container c;
    std::vector<int> ids(dump.prompt.ids.begin(), dump.prompt.ids.end());
    c.meta = {{"prompt", join_ints(ids)},
              {"steps", std::to_string(dump.sampler.num_steps)},
              {"cfg_scale", exact(dump.sampler.cfg_scale)},
              {"seed", std::to_string(dump.sampler.seed)},
              {"attention_source", attention_source_name(dump.sampler.attention_source)},
              {"timesteps", join_ints(dump.record.timesteps)},
              {"height", std::to_string(dump.record.height)},
              {"width", std::to_string(dump.record.width)},
              {"layers", std::to_string(dump.record.layers())}};
    for (std::size_t i = 0; i < dump.record.steps(); ++i)
        for (std::size_t j = 0; j < dump.record.maps[i].size(); ++j)
            c.tensors.emplace_back("t" + std::to_string(i) + "_layer" + std::to_string(j), dump.record.maps[i][j]);
    write_file(path, encode_container(c, attention_magic));
}

AttentionDump load_attention(const fs::path& path) {
    const Container c = decode_container(read_file(path), attention_magic);
    AttentionDump d;
    const std::vector<int> ids = split_ints(c.get("prompt"));
    require(ids.size() == Prompt::length, ErrorCode::malformed, "attention dump prompt has wrong length");
    for (std::size_t i = 0; i < ids.size(); ++i) d.prompt.ids[i] = ids[i];
    d.sampler.num_steps = parse_number<int>(c.get("steps"), "steps");
    d.sampler.cfg_scale = parse_number<double>(c.get("cfg_scale"), "cfg_scale");
    d.sampler.seed = parse_number<std::uint64_t>(c.get("seed"), "seed");
    d.sampler.attention_source = parse_attention_source(c.get("attention_source"));
    d.record.timesteps = split_ints(c.get("timesteps"));
    d.record.height = parse_number<std::size_t>(c.get("height"), "height");
    d.record.width = parse_number<std::size_t>(c.get("width"), "width");
    const std::size_t layers = parse_number<std::size_t>(c.get("layers"), "layers");
    require(c.tensors.size() == d.record.timesteps.size() * layers, ErrorCode::malformed,
            "attention dump holds " + std::to_string(c.tensors.size()) + " tensors, expected " +
                std::to_string(d.record.timesteps.size() * layers));
    std::size_t k = 0;
    for (std::size_t i = 0; i < d.record.timesteps.size(); ++i) {
        std::vector<Tensor> step;
        for (std::size_t j = 0; j < layers; ++j, ++k) {
            const auto& [name, t] = c.tensors[k];
            require(name == "t" + std::to_string(i) + "_layer" + std::to_string(j), ErrorCode::malformed,
                    "unexpected tensor '" + name + "' in attention dump");
            require(t.rank() == 3 && t.dim(2) == Prompt::length, ErrorCode::malformed,
                    "attention tensor '" + name + "' has shape " + shape_str(t.shape()));
            const std::size_t N = t.dim(2);
            for (std::size_t row = 0; row < t.numel() / N; ++row) {
                double s = 0;
                for (std::size_t n = 0; n < N; ++n) s += t[row * N + n];
                require(std::abs(s - 1.0) <= 1e-5, ErrorCode::malformed,
                        "attention row " + std::to_string(row) + " of '" + name + "' sums to " + exact(s));
            }
            step.push_back(t);
        }
        d.record.maps.push_back(std::move(step));
    }
    return d;
}

std::string encode_pgm(const Tensor& image) {
    require(image.rank() == 3 && image.dim(0) == 1, ErrorCode::shape_mismatch,
            "PGM needs a 1xHxW image, got " + shape_str(image.shape()));
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (float v : image.data()) {
        require(std::isfinite(v), ErrorCode::non_finite, "PGM pixel is not finite");
        const double c = std::clamp(double(v), 0.0, 1.0);
        out.push_back(char(std::uint8_t(std::floor(c * 255.0 + 0.5))));
    }
    return out;
}

Tensor decode_pgm(const std::string& bytes) {
    std::size_t pos = 0;
    auto token = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        require(pos > start, ErrorCode::malformed, "PGM header ended early");
        return bytes.substr(start, pos - start);
    };
    require(token() == "P5", ErrorCode::malformed, "not a binary PGM (P5)");
    const auto w = parse_number<std::size_t>(token(), "PGM width");
    const auto h = parse_number<std::size_t>(token(), "PGM height");
    require(parse_number<int>(token(), "PGM maxval") == 255, ErrorCode::malformed, "PGM maxval must be 255");
    require(pos < bytes.size() && w > 0 && h > 0, ErrorCode::malformed, "PGM header malformed");
    ++pos;
    require(bytes.size() - pos == w * h, ErrorCode::truncation,
            "PGM payload holds " + std::to_string(bytes.size() - pos) + " bytes, expected " + std::to_string(w * h));
    Tensor t({1, h, w});
    for (std::size_t i = 0; i < w * h; ++i) t[i] = float(std::uint8_t(bytes[pos + i])) / 255.0f;
    return t;
}

void write_image_pgm(const Tensor& image, const fs::path& path) { write_file(path, encode_pgm(image)); }

Tensor read_image_pgm(const fs::path& path) { return decode_pgm(read_file(path)); }

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    std::string s = buf;
    return s == "-0.000000" ? "0.000000" : s;
}

std::string format_metrics_csv(const std::vector<MetricsRow>& rows) {
    std::string out = std::string(metrics_header) + "\n";
    for (const MetricsRow& r : rows)
        out += std::to_string(r.guidance_step) + "," + std::to_string(r.edit_step) + "," + fixed6(r.alpha) + "," +
               fixed6(r.cfg) + "," + fixed6(r.subject_fidelity) + "," + fixed6(r.prompt_fidelity) + "," +
               fixed6(r.diversity) + "," + fixed6(r.f1) + "," + std::to_string(r.n_images) + "\n";
    return out;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
    std::stringstream ss(text);
    std::string line;
    require(std::getline(ss, line) && line == metrics_header, ErrorCode::malformed, "metrics CSV header mismatch");
    std::vector<MetricsRow> rows;
    while (std::getline(ss, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        require(f.size() == 9, ErrorCode::malformed, "metrics CSV row has " + std::to_string(f.size()) + " fields");
        MetricsRow r;
        r.guidance_step = parse_number<int>(f[0], "guidance_step");
        r.edit_step = parse_number<int>(f[1], "edit_step");
        r.alpha = parse_number<double>(f[2], "alpha");
        r.cfg = parse_number<double>(f[3], "cfg");
        r.subject_fidelity = parse_number<double>(f[4], "subject_fidelity");
        r.prompt_fidelity = parse_number<double>(f[5], "prompt_fidelity");
        r.diversity = parse_number<double>(f[6], "diversity");
        r.f1 = parse_number<double>(f[7], "f1");
        r.n_images = parse_number<int>(f[8], "n_images");
        rows.push_back(r);
    }
    return rows;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const fs::path& path) {
    write_file(path, format_metrics_csv(rows));
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) { return parse_metrics_csv(read_file(path)); }

}  // namespace dblend

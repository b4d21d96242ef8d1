#include "dblend/model.hpp"

#include <cmath>
#include <sstream>

#include "dblend/rng.hpp"

namespace dblend {

namespace {

std::vector<std::size_t> parse_list(std::string_view s) {
    std::vector<std::size_t> out;
    std::size_t cur = 0;
    bool any = false;
    for (char c : s) {
        if (c == ',') {
            require(any, ErrorCode::malformed, "empty entry in list '" + std::string(s) + "'");
            out.push_back(cur);
            cur = 0;
            any = false;
        } else {
            require(c >= '0' && c <= '9', ErrorCode::malformed, "bad digit in '" + std::string(s) + "'");
            cur = cur * 10 + std::size_t(c - '0');
            any = true;
        }
    }
    require(any, ErrorCode::malformed, "empty entry in list '" + std::string(s) + "'");
    out.push_back(cur);
    return out;
}

void add_res_layout(std::vector<std::pair<std::string, Shape>>& out, const std::string& p, std::size_t in,
                    std::size_t ch, std::size_t temb) {
    out.push_back({p + ".norm1.g", {in}});
    out.push_back({p + ".norm1.b", {in}});
    out.push_back({p + ".conv1.w", {ch, in, 3, 3}});
    out.push_back({p + ".conv1.b", {ch}});
    out.push_back({p + ".temb.w", {temb, ch}});
    out.push_back({p + ".temb.b", {ch}});
    out.push_back({p + ".norm2.g", {ch}});
    out.push_back({p + ".norm2.b", {ch}});
    out.push_back({p + ".conv2.w", {ch, ch, 3, 3}});
    out.push_back({p + ".conv2.b", {ch}});
    if (in != ch) {
        out.push_back({p + ".skip.w", {ch, in, 1, 1}});
        out.push_back({p + ".skip.b", {ch}});
    }
}

void add_attn_layout(std::vector<std::pair<std::string, Shape>>& out, const std::string& p, std::size_t ch,
                     const ArchDescriptor& a) {
    out.push_back({p + ".norm.g", {ch}});
    out.push_back({p + ".norm.b", {ch}});
    for (std::size_t h = 0; h < a.heads; ++h) {
        const std::string hs = std::to_string(h);
        out.push_back({p + ".wq" + hs, {ch, a.head_dim}});
        out.push_back({p + ".wk" + hs, {a.text_dim, a.head_dim}});
        out.push_back({p + ".wv" + hs, {a.text_dim, a.head_dim}});
    }
    out.push_back({p + ".wo", {a.heads * a.head_dim, ch}});
    out.push_back({p + ".bo", {ch}});
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

ArchDescriptor ArchDescriptor::preset(std::string_view name) {
    if (name == "default") return ArchDescriptor{};
    if (name == "fast") {
        ArchDescriptor a;
        a.image_size = 16;
        a.channels = {16, 32};
        a.heads = 2;
        a.head_dim = 16;
        a.text_dim = 32;
        a.groups = 4;
        return a;
    }
    fail(ErrorCode::invalid_argument, "unknown architecture preset '" + std::string(name) + "'");
}

std::string ArchDescriptor::str() const {
    std::ostringstream os;
    os << "image=" << image_size << ";channels=";
    for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
    os << ";heads=" << heads << ";head_dim=" << head_dim << ";text_dim=" << text_dim << ";groups=" << groups;
    return os.str();
}

ArchDescriptor ArchDescriptor::parse(std::string_view text) {
    if (text == "default" || text == "fast") return preset(text);
    ArchDescriptor a;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find(';', pos);
        if (end == std::string_view::npos) end = text.size();
        const std::string_view item = text.substr(pos, end - pos);
        const std::size_t eq = item.find('=');
        require(eq != std::string_view::npos, ErrorCode::malformed, "bad architecture entry '" + std::string(item) + "'");
        const std::string_view key = item.substr(0, eq), val = item.substr(eq + 1);
        const std::vector<std::size_t> nums = parse_list(val);
        auto one = [&]() {
            require(nums.size() == 1, ErrorCode::malformed, "expected one value for " + std::string(key));
            return nums[0];
        };
        if (key == "image") a.image_size = one();
        else if (key == "channels") a.channels = nums;
        else if (key == "heads") a.heads = one();
        else if (key == "head_dim") a.head_dim = one();
        else if (key == "text_dim") a.text_dim = one();
        else if (key == "groups") a.groups = one();
        else fail(ErrorCode::malformed, "unknown architecture key '" + std::string(key) + "'");
        pos = end + 1;
    }
    a.validate();
    return a;
}

void ArchDescriptor::validate() const {
    require(!channels.empty() && channels.size() <= 6, ErrorCode::invalid_argument, "architecture needs 1..6 levels");
    require(image_size >= 4 && (image_size >> (channels.size() - 1)) << (channels.size() - 1) == image_size,
            ErrorCode::invalid_argument, "image size must be divisible by 2^(levels-1)");
    require(heads > 0 && head_dim > 0 && text_dim > 0 && groups > 0, ErrorCode::invalid_argument,
            "architecture dimensions must be positive");
    for (std::size_t i = 0; i < channels.size(); ++i) {
        require(channels[i] > 0 && channels[i] % groups == 0, ErrorCode::invalid_argument,
                "channel width " + std::to_string(channels[i]) + " not divisible by groups");
    }
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ArchDescriptor& a) {
    a.validate();
    const std::size_t L = a.levels(), c0 = a.channels[0], temb = a.time_dim();
    std::vector<std::pair<std::string, Shape>> out;
    out.push_back({"text.embed", {Vocabulary::standard().size(), a.text_dim}});
    out.push_back({"time.fc1.w", {c0, temb}});
    out.push_back({"time.fc1.b", {temb}});
    out.push_back({"time.fc2.w", {temb, temb}});
    out.push_back({"time.fc2.b", {temb}});
    out.push_back({"conv_in.w", {c0, 1, 3, 3}});
    out.push_back({"conv_in.b", {c0}});
    for (std::size_t i = 0; i < L; ++i)
        add_res_layout(out, "down" + std::to_string(i) + ".res", i == 0 ? c0 : a.channels[i - 1], a.channels[i], temb);
    add_attn_layout(out, "down" + std::to_string(L - 1) + ".attn", a.channels[L - 1], a);
    add_res_layout(out, "up" + std::to_string(L - 1) + ".res", a.channels[L - 1], a.channels[L - 1], temb);
    add_attn_layout(out, "up" + std::to_string(L - 1) + ".attn", a.channels[L - 1], a);
    for (std::size_t i = L - 1; i-- > 0;)
        add_res_layout(out, "up" + std::to_string(i) + ".res", a.channels[i + 1] + a.channels[i], a.channels[i], temb);
    out.push_back({"out.norm.g", {c0}});
    out.push_back({"out.norm.b", {c0}});
    out.push_back({"out.conv.w", {1, c0, 3, 3}});
    out.push_back({"out.conv.b", {1}});
    return out;
}

const Tensor& Checkpoint::param(const std::string& name) const {
    auto it = params.find(name);
    require(it != params.end(), ErrorCode::invalid_argument, "checkpoint has no parameter '" + name + "'");
    return it->second;
}

std::size_t Checkpoint::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
}

void Checkpoint::validate() const {
    require(vocab_hash == Vocabulary::standard().hash(), ErrorCode::vocab_mismatch,
            "checkpoint vocabulary hash " + hash_hex(vocab_hash) + " does not match runtime vocabulary " +
                hash_hex(Vocabulary::standard().hash()));
    const auto layout = parameter_layout(arch);
    require(layout.size() == params.size(), ErrorCode::shape_mismatch,
            "checkpoint holds " + std::to_string(params.size()) + " tensors, architecture declares " +
                std::to_string(layout.size()));
    for (const auto& [name, shape] : layout) {
        const Tensor& t = param(name);
        require(t.shape() == shape, ErrorCode::shape_mismatch,
                "parameter " + name + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(shape));
    }
}

Checkpoint init_params(std::uint64_t seed, const ArchDescriptor& arch) {
    Checkpoint ck;
    ck.arch = arch;
    ck.seed = seed;
    ck.vocab_hash = Vocabulary::standard().hash();
    for (const auto& [name, shape] : parameter_layout(arch)) {
        Tensor t(shape);
        CounterRng rng = CounterRng::stream(seed, fnv1a64(name));
        if (name == "text.embed") {
            for (float& v : t.data()) v = float(2.0 * rng.uniform() - 1.0);
        } else if (ends_with(name, ".g")) {
            for (float& v : t.data()) v = 1.0f;
        } else if (ends_with(name, ".w") || ends_with(name, ".wo") || name.find(".wq") != std::string::npos ||
                   name.find(".wk") != std::string::npos || name.find(".wv") != std::string::npos) {
            // Conv weights [O,I,k,k] have fan-in I*k*k; matrices [in,out] have fan-in `in`.
            const std::size_t fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
            const double bound = 1.0 / std::sqrt(double(fan_in));
            for (float& v : t.data()) v = float(bound * (2.0 * rng.uniform() - 1.0));
        }
        ck.params.emplace(name, std::move(t));
    }
    return ck;
}

Tensor encode_prompt(const Checkpoint& ckpt, const Prompt& prompt) {
    require(ckpt.vocab_hash == Vocabulary::standard().hash(), ErrorCode::vocab_mismatch,
            "encode_prompt: checkpoint vocabulary hash mismatch");
    prompt.validate();
    const Tensor& table = ckpt.param("text.embed");
    const std::size_t d = table.dim(1);
    Tensor c({Prompt::length, d});
    for (std::size_t i = 0; i < Prompt::length; ++i)
        std::copy_n(table.ptr() + std::size_t(prompt.ids[i]) * d, d, c.ptr() + i * d);
    return c;
}

template <typename T>
BasicTensor<T> timestep_features(const ArchDescriptor& arch, int t) {
    const std::size_t dim = arch.channels.front(), half = dim / 2;
    BasicTensor<T> f({1, dim});
    for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * double(i) / double(half));
        f[i] = T(std::sin(double(t) * freq));
        f[half + i] = T(std::cos(double(t) * freq));
    }
    return f;
}

template <typename T>
ParamNodes<T> bind_params(Tape<T>& tape, const Checkpoint& ckpt) {
    ParamNodes<T> ids;
    for (const auto& [name, t] : ckpt.params) {
        if constexpr (std::is_same_v<T, float>)
            ids.emplace(name, tape.leaf(t, "param:" + name));
        else
            ids.emplace(name, tape.leaf(t.template cast<T>(), "param:" + name));
    }
    return ids;
}

namespace {

template <typename T>
class GraphBuilder {
   public:
    GraphBuilder(Tape<T>& tape, const ArchDescriptor& arch, const ParamNodes<T>& params)
        : t_(tape), a_(arch), p_(params) {}

    NodeId p(const std::string& name) const {
        auto it = p_.find(name);
        require(it != p_.end(), ErrorCode::invalid_argument, "missing parameter '" + name + "'");
        return it->second;
    }

    // x [1,in] -> [1,out]
    NodeId linear(NodeId x, const std::string& prefix) {
        const NodeId b = p(prefix + ".b");
        const std::size_t out = t_.value(b).numel();
        return t_.add(t_.matmul(x, p(prefix + ".w")), t_.reshape(b, {1, out}));
    }

    // Adds a per-channel vector [1,C] to a [C,H,W] map via an outer product with ones.
    NodeId add_channel_bias(NodeId x, NodeId bias_row) {
        const Shape& s = t_.value(x).shape();
        const NodeId col = t_.reshape(bias_row, {s[0], 1});
        const NodeId plane = t_.matmul(col, ones(1, s[1] * s[2]));
        return t_.add(x, t_.reshape(plane, s));
    }

    NodeId ones(std::size_t rows, std::size_t cols) {
        const auto key = std::make_pair(rows, cols);
        auto it = ones_.find(key);
        if (it != ones_.end()) return it->second;
        const NodeId id = t_.leaf(BasicTensor<T>({rows, cols}, T(1)));
        ones_.emplace(key, id);
        return id;
    }

    NodeId norm(NodeId x, const std::string& prefix) {
        return t_.group_norm(x, p(prefix + ".g"), p(prefix + ".b"), a_.groups);
    }

    NodeId res_block(NodeId x, NodeId temb_act, const std::string& prefix) {
        NodeId h = t_.conv2d(t_.silu(norm(x, prefix + ".norm1")), p(prefix + ".conv1.w"), p(prefix + ".conv1.b"));
        h = add_channel_bias(h, linear(temb_act, prefix + ".temb"));
        h = t_.conv2d(t_.silu(norm(h, prefix + ".norm2")), p(prefix + ".conv2.w"), p(prefix + ".conv2.b"));
        const bool proj = p_.count(prefix + ".skip.w") != 0;
        const NodeId skip = proj ? t_.conv2d(x, p(prefix + ".skip.w"), p(prefix + ".skip.b")) : x;
        return t_.add(h, skip);
    }

    // Returns the block output and, when requested, the (heads, M, N) map node.
    std::pair<NodeId, NodeId> cross_attention(NodeId x, NodeId text, const std::string& prefix, bool record) {
        const Shape s = t_.value(x).shape();
        const std::size_t ch = s[0], m = s[1] * s[2], n = t_.value(text).dim(0);
        const NodeId tokens = t_.transpose(t_.reshape(norm(x, prefix + ".norm"), {ch, m}));  // [M,C]
        const T inv_sqrt_d = T(1.0 / std::sqrt(double(a_.head_dim)));
        std::vector<NodeId> head_out, head_maps;
        for (std::size_t h = 0; h < a_.heads; ++h) {
            const std::string hs = std::to_string(h);
            const NodeId q = t_.matmul(tokens, p(prefix + ".wq" + hs));  // [M,d]
            const NodeId k = t_.matmul(text, p(prefix + ".wk" + hs));    // [N,d]
            const NodeId v = t_.matmul(text, p(prefix + ".wv" + hs));    // [N,d]
            const NodeId attn = t_.softmax(t_.scale(t_.matmul(q, t_.transpose(k)), inv_sqrt_d));  // [M,N]
            head_out.push_back(t_.matmul(attn, v));
            if (record) head_maps.push_back(t_.reshape(attn, {1, m, n}));
        }
        const NodeId merged = a_.heads == 1 ? head_out[0] : t_.concat(head_out, 1);  // [M, heads*d]
        NodeId proj = t_.matmul(merged, p(prefix + ".wo"));                         // [M,C]
        proj = t_.add(proj, t_.matmul(ones(m, 1), t_.reshape(p(prefix + ".bo"), {1, ch})));
        const NodeId back = t_.reshape(t_.transpose(proj), s);
        NodeId maps = no_node;
        if (record) maps = a_.heads == 1 ? head_maps[0] : t_.concat(head_maps, 0);
        return {t_.add(x, back), maps};
    }

   private:
    Tape<T>& t_;
    const ArchDescriptor& a_;
    const ParamNodes<T>& p_;
    std::map<std::pair<std::size_t, std::size_t>, NodeId> ones_;
};

}  // namespace

template <typename T>
UnetNodes<T> unet_graph(Tape<T>& tape, const ArchDescriptor& arch, const ParamNodes<T>& params, NodeId latent, int t,
                        NodeId text, bool record) {
    const Shape& ls = tape.value(latent).shape();
    require(ls == Shape{1, arch.image_size, arch.image_size}, ErrorCode::shape_mismatch,
            "latent shape " + shape_str(ls) + " does not match architecture image size " + std::to_string(arch.image_size));
    const Shape& ts = tape.value(text).shape();
    require(ts.size() == 2 && ts[1] == arch.text_dim, ErrorCode::shape_mismatch,
            "text features shape " + shape_str(ts) + " does not match text_dim " + std::to_string(arch.text_dim));
    require(t >= 0, ErrorCode::invalid_argument, "negative timestep");

    GraphBuilder<T> g(tape, arch, params);
    const std::size_t L = arch.levels();
    UnetNodes<T> out;

    const NodeId tfeat = tape.leaf(timestep_features<T>(arch, t));
    const NodeId temb = g.linear(tape.silu(g.linear(tfeat, "time.fc1")), "time.fc2");
    const NodeId temb_act = tape.silu(temb);

    NodeId h = tape.conv2d(latent, g.p("conv_in.w"), g.p("conv_in.b"));
    std::vector<NodeId> skips;
    for (std::size_t i = 0; i < L; ++i) {
        if (i > 0) h = tape.downsample2x(h);
        h = g.res_block(h, temb_act, "down" + std::to_string(i) + ".res");
        if (i == L - 1) {
            auto [y, m] = g.cross_attention(h, text, "down" + std::to_string(i) + ".attn", record);
            h = y;
            if (record) out.maps.push_back(m);
        }
        skips.push_back(h);
    }
    h = g.res_block(h, temb_act, "up" + std::to_string(L - 1) + ".res");
    {
        auto [y, m] = g.cross_attention(h, text, "up" + std::to_string(L - 1) + ".attn", record);
        h = y;
        if (record) out.maps.push_back(m);
    }
    for (std::size_t i = L - 1; i-- > 0;) {
        h = tape.upsample2x(h);
        const NodeId cat[] = {h, skips[i]};
        h = g.res_block(tape.concat(cat, 0), temb_act, "up" + std::to_string(i) + ".res");
    }
    h = tape.silu(g.norm(h, "out.norm"));
    out.eps = tape.conv2d(h, g.p("out.conv.w"), g.p("out.conv.b"));
    return out;
}

UnetOutput unet_forward(const Checkpoint& ckpt, const Tensor& latent, int t, const Tensor& text, bool record) {
    Tape<float> tape;
    const auto params = bind_params(tape, ckpt);
    const NodeId l = tape.leaf(latent);
    const NodeId c = tape.leaf(text);
    const UnetNodes<float> nodes = unet_graph(tape, ckpt.arch, params, l, t, c, record);
    UnetOutput out;
    out.eps = tape.value(nodes.eps);
    for (NodeId m : nodes.maps) out.maps.push_back(tape.value(m));
    return out;
}

template BasicTensor<float> timestep_features<float>(const ArchDescriptor&, int);
template BasicTensor<double> timestep_features<double>(const ArchDescriptor&, int);
template ParamNodes<float> bind_params<float>(Tape<float>&, const Checkpoint&);
template ParamNodes<double> bind_params<double>(Tape<double>&, const Checkpoint&);
template UnetNodes<float> unet_graph<float>(Tape<float>&, const ArchDescriptor&, const ParamNodes<float>&, NodeId, int,
                                            NodeId, bool);
template UnetNodes<double> unet_graph<double>(Tape<double>&, const ArchDescriptor&, const ParamNodes<double>&, NodeId,
                                              int, NodeId, bool);

}  // namespace dblend

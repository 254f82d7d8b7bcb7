#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "marepo/encoding.hpp"
#include "marepo/errors.hpp"
#include "marepo/geometry.hpp"
#include "marepo/pose_decode.hpp"
#include "marepo/rng.hpp"
#include "marepo/scm.hpp"

namespace marepo::model {

using encoding::MatX;
using encoding::TokenGrid;
using encoding::VecX;

struct RegressorConfig {
    int d_model = 32;       // desk-scale default; 256 reproduces the full-scale width
    int n_heads = 4;
    int n_blocks = 12;
    int group_size = 4;
    int ffn_dim = 0;        // 0 = 2 * d_model
    int freq_bands = 5;     // m of the 3D embedding
    bool enable_reattention = true;
    bool enable_dynamic_pe = true;
    // Alternative re-attention wiring: re-inject each group's own input
    // instead of the fused encoding x0.
    bool reinject_group_input = false;
    RotationRepr rotation_repr = RotationRepr::k6d;

    int ffn() const { return ffn_dim > 0 ? ffn_dim : 2 * d_model; }
    int n_groups() const { return n_blocks / group_size; }
    int head_dim() const { return d_model / n_heads; }
    int out_dims() const { return pose_vector_dims(rotation_repr); }
    encoding::EncodingConfig encoding() const { return {d_model, freq_bands}; }

    void check() const {
        if (d_model <= 0 || d_model % 4 != 0)
            throw ShapeMismatch("RegressorConfig: d_model must be positive and divisible by 4");
        if (n_heads <= 0 || d_model % n_heads != 0)
            throw ShapeMismatch("RegressorConfig: d_model must be divisible by n_heads");
        if (group_size <= 0 || n_blocks <= 0 || n_blocks % group_size != 0)
            throw ShapeMismatch("RegressorConfig: n_blocks must be a multiple of group_size");
        if (ffn() < 1) throw ShapeMismatch("RegressorConfig: ffn_dim must be >= 1");
        if (freq_bands < 1) throw ShapeMismatch("RegressorConfig: freq_bands must be >= 1");
    }
};

// Weight convention throughout: rows are tokens, layers compute x * W + b
// with W of shape (d_in, d_out).
template <class S>
struct AttentionParams {
    MatX<S> wq, wk, wv, wo;
    VecX<S> bq, bk, bv, bo;
};

template <class S>
struct BlockParams {
    VecX<S> ln1_g, ln1_b;
    AttentionParams<S> attn;
    VecX<S> ln2_g, ln2_b;
    MatX<S> w1, w2;
    VecX<S> b1, b2;
};

template <class S>
struct HeadParams {
    MatX<S> c1, c2, c3;  // residual 1x1 channel-mixing layers
    VecX<S> d1, d2, d3;
    MatX<S> m1, m2, m3;  // MLP after pooling
    VecX<S> e1, e2, e3;
};

template <class S>
struct ModelParams {
    MatX<S> pe_w;  // 3(2m+1) x d_model
    VecX<S> pe_b;
    std::vector<BlockParams<S>> blocks;
    std::vector<HeadParams<S>> heads;  // one per block group
};

// ---------------------------------------------------------------------------
// Parameter plumbing

template <class P, class Fn>
void for_each_tensor(P&& p, Fn&& fn) {
    fn("pe3d.conv.w", p.pe_w);
    fn("pe3d.conv.b", p.pe_b);
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        auto& b = p.blocks[i];
        const std::string prefix = "block" + std::to_string(i) + ".";
        fn(prefix + "ln1.g", b.ln1_g);
        fn(prefix + "ln1.b", b.ln1_b);
        fn(prefix + "attn.wq", b.attn.wq);
        fn(prefix + "attn.bq", b.attn.bq);
        fn(prefix + "attn.wk", b.attn.wk);
        fn(prefix + "attn.bk", b.attn.bk);
        fn(prefix + "attn.wv", b.attn.wv);
        fn(prefix + "attn.bv", b.attn.bv);
        fn(prefix + "attn.wo", b.attn.wo);
        fn(prefix + "attn.bo", b.attn.bo);
        fn(prefix + "ln2.g", b.ln2_g);
        fn(prefix + "ln2.b", b.ln2_b);
        fn(prefix + "ffn.w1", b.w1);
        fn(prefix + "ffn.b1", b.b1);
        fn(prefix + "ffn.w2", b.w2);
        fn(prefix + "ffn.b2", b.b2);
    }
    for (std::size_t i = 0; i < p.heads.size(); ++i) {
        auto& h = p.heads[i];
        const std::string prefix = "head" + std::to_string(i) + ".";
        fn(prefix + "conv1.w", h.c1);
        fn(prefix + "conv1.b", h.d1);
        fn(prefix + "conv2.w", h.c2);
        fn(prefix + "conv2.b", h.d2);
        fn(prefix + "conv3.w", h.c3);
        fn(prefix + "conv3.b", h.d3);
        fn(prefix + "mlp1.w", h.m1);
        fn(prefix + "mlp1.b", h.e1);
        fn(prefix + "mlp2.w", h.m2);
        fn(prefix + "mlp2.b", h.e2);
        fn(prefix + "mlp3.w", h.m3);
        fn(prefix + "mlp3.b", h.e3);
    }
}

template <class S>
ModelParams<S> make_zero_params(const RegressorConfig& cfg) {
    cfg.check();
    const int d = cfg.d_model;
    const int f = cfg.ffn();
    const int raw = 3 * (2 * cfg.freq_bands + 1);
    ModelParams<S> p;
    p.pe_w = MatX<S>::Zero(raw, d);
    p.pe_b = VecX<S>::Zero(d);
    p.blocks.resize(cfg.n_blocks);
    for (auto& b : p.blocks) {
        b.ln1_g = VecX<S>::Zero(d);
        b.ln1_b = VecX<S>::Zero(d);
        b.attn.wq = MatX<S>::Zero(d, d);
        b.attn.wk = MatX<S>::Zero(d, d);
        b.attn.wv = MatX<S>::Zero(d, d);
        b.attn.wo = MatX<S>::Zero(d, d);
        b.attn.bq = VecX<S>::Zero(d);
        b.attn.bk = VecX<S>::Zero(d);
        b.attn.bv = VecX<S>::Zero(d);
        b.attn.bo = VecX<S>::Zero(d);
        b.ln2_g = VecX<S>::Zero(d);
        b.ln2_b = VecX<S>::Zero(d);
        b.w1 = MatX<S>::Zero(d, f);
        b.b1 = VecX<S>::Zero(f);
        b.w2 = MatX<S>::Zero(f, d);
        b.b2 = VecX<S>::Zero(d);
    }
    p.heads.resize(cfg.n_groups());
    const int out = cfg.out_dims();
    for (auto& h : p.heads) {
        h.c1 = MatX<S>::Zero(d, d);
        h.c2 = MatX<S>::Zero(d, d);
        h.c3 = MatX<S>::Zero(d, d);
        h.d1 = VecX<S>::Zero(d);
        h.d2 = VecX<S>::Zero(d);
        h.d3 = VecX<S>::Zero(d);
        h.m1 = MatX<S>::Zero(d, d);
        h.m2 = MatX<S>::Zero(d, d);
        h.m3 = MatX<S>::Zero(d, out);
        h.e1 = VecX<S>::Zero(d);
        h.e2 = VecX<S>::Zero(d);
        h.e3 = VecX<S>::Zero(out);
    }
    return p;
}

// Identity-pose bias of the final head layer: softplus(w0) = 1.
inline double identity_w0() { return std::log(std::exp(1.0) - 1.0); }

template <class S>
VecX<S> identity_pose_bias(RotationRepr repr) {
    VecX<S> b = VecX<S>::Zero(pose_vector_dims(repr));
    b(3) = static_cast<S>(identity_w0());
    if (repr == RotationRepr::k6d) {
        b(4) = S(1);
        b(8) = S(1);
    } else {
        b(4) = S(1);
        b(8) = S(1);
        b(12) = S(1);
    }
    return b;
}

// Deterministic fan-in-scaled uniform init. The final layer of every pose
// head is zeroed with an identity-pose bias, so an untrained network
// predicts the identity pose for any input.
template <class S>
ModelParams<S> init_params(const RegressorConfig& cfg, std::uint64_t seed) {
    ModelParams<S> p = make_zero_params<S>(cfg);
    Rng rng(seed);
    // Biases and LN offsets stay zero; weights draw in visitor order so the
    // stream is reproducible.
    for_each_tensor(p, [&](const std::string& name, auto& t) {
        using T = std::decay_t<decltype(t)>;
        if constexpr (T::ColsAtCompileTime == 1) {
            if (name.ends_with("ln1.g") || name.ends_with("ln2.g")) t.setOnes();
        } else {
            const double bound = std::sqrt(1.0 / static_cast<double>(t.rows()));
            for (Eigen::Index i = 0; i < t.rows(); ++i)
                for (Eigen::Index j = 0; j < t.cols(); ++j)
                    t(i, j) = static_cast<S>(rng.uniform(-bound, bound));
        }
    });
    for (auto& h : p.heads) {
        h.m3.setZero();
        h.e3 = identity_pose_bias<S>(cfg.rotation_repr);
    }
    return p;
}

template <class To, class From>
ModelParams<To> cast_params(const ModelParams<From>& in) {
    ModelParams<To> out;
    out.pe_w = in.pe_w.template cast<To>();
    out.pe_b = in.pe_b.template cast<To>();
    out.blocks.resize(in.blocks.size());
    out.heads.resize(in.heads.size());
    auto cast_block = [](const BlockParams<From>& b) {
        BlockParams<To> o;
        o.ln1_g = b.ln1_g.template cast<To>();
        o.ln1_b = b.ln1_b.template cast<To>();
        o.attn.wq = b.attn.wq.template cast<To>();
        o.attn.wk = b.attn.wk.template cast<To>();
        o.attn.wv = b.attn.wv.template cast<To>();
        o.attn.wo = b.attn.wo.template cast<To>();
        o.attn.bq = b.attn.bq.template cast<To>();
        o.attn.bk = b.attn.bk.template cast<To>();
        o.attn.bv = b.attn.bv.template cast<To>();
        o.attn.bo = b.attn.bo.template cast<To>();
        o.ln2_g = b.ln2_g.template cast<To>();
        o.ln2_b = b.ln2_b.template cast<To>();
        o.w1 = b.w1.template cast<To>();
        o.b1 = b.b1.template cast<To>();
        o.w2 = b.w2.template cast<To>();
        o.b2 = b.b2.template cast<To>();
        return o;
    };
    auto cast_head = [](const HeadParams<From>& h) {
        HeadParams<To> o;
        o.c1 = h.c1.template cast<To>();
        o.c2 = h.c2.template cast<To>();
        o.c3 = h.c3.template cast<To>();
        o.d1 = h.d1.template cast<To>();
        o.d2 = h.d2.template cast<To>();
        o.d3 = h.d3.template cast<To>();
        o.m1 = h.m1.template cast<To>();
        o.m2 = h.m2.template cast<To>();
        o.m3 = h.m3.template cast<To>();
        o.e1 = h.e1.template cast<To>();
        o.e2 = h.e2.template cast<To>();
        o.e3 = h.e3.template cast<To>();
        return o;
    };
    for (std::size_t i = 0; i < in.blocks.size(); ++i) out.blocks[i] = cast_block(in.blocks[i]);
    for (std::size_t i = 0; i < in.heads.size(); ++i) out.heads[i] = cast_head(in.heads[i]);
    return out;
}

template <class S>
std::size_t param_count(const ModelParams<S>& p) {
    std::size_t n = 0;
    for_each_tensor(p, [&](const std::string&, const auto& t) { n += t.size(); });
    return n;
}

// ---------------------------------------------------------------------------
// Elementwise math

namespace detail {

template <class S>
S gelu(S x) {
    return S(0.5) * x * (S(1) + std::erf(x * S(0.7071067811865476)));
}

template <class S>
S gelu_grad(S x) {
    const S cdf = S(0.5) * (S(1) + std::erf(x * S(0.7071067811865476)));
    const S pdf = std::exp(S(-0.5) * x * x) * S(0.3989422804014327);
    return cdf + x * pdf;
}

// Attention feature map phi(x) = elu(x) + 1; phi' = min(phi, 1).
template <class S>
S phi(S x) {
    return x > S(0) ? x + S(1) : std::exp(x);
}

// Vectorized elementwise kernels. Forward and backward share the same erf
// implementation, so analytic gradients stay consistent with the forward
// values they differentiate.
template <class D>
auto apply_phi(const Eigen::MatrixBase<D>& m) {
    using S = typename D::Scalar;
    return ((m.array() > S(0)).select(m.array() + S(1), m.array().exp())).matrix().eval();
}

template <class D>
auto apply_gelu(const Eigen::MatrixBase<D>& m) {
    using S = typename D::Scalar;
    return (S(0.5) * m.array() * (S(1) + (m.array() * S(0.7071067811865476)).erf()))
        .matrix()
        .eval();
}

template <class D, class E>
auto apply_gelu_grad(const Eigen::MatrixBase<D>& g, const Eigen::MatrixBase<E>& x) {
    using S = typename D::Scalar;
    const auto cdf = S(0.5) * (S(1) + (x.array() * S(0.7071067811865476)).erf());
    const auto pdf = (S(-0.5) * x.array().square()).exp() * S(0.3989422804014327);
    return (g.array() * (cdf + x.array() * pdf)).matrix().eval();
}

inline constexpr double kLnEps = 1e-5;

// Row-wise layer norm; stores the normalized rows and 1/sigma for backward.
template <class S>
void layer_norm(const MatX<S>& x, const VecX<S>& gain, const VecX<S>& bias, MatX<S>& xhat,
                VecX<S>& inv_sigma, MatX<S>& out) {
    const VecX<S> mu = x.rowwise().mean();
    xhat = (x.array().colwise() - mu.array()).matrix();
    const VecX<S> var = xhat.array().square().rowwise().mean().matrix();
    inv_sigma = (var.array() + S(kLnEps)).sqrt().inverse().matrix();
    xhat = (xhat.array().colwise() * inv_sigma.array()).matrix();
    out = ((xhat.array().rowwise() * gain.transpose().array()).rowwise() +
           bias.transpose().array())
              .matrix();
}

template <class S>
void layer_norm_backward(const MatX<S>& g_out, const MatX<S>& xhat, const VecX<S>& inv_sigma,
                         const VecX<S>& gain, MatX<S>& g_x, VecX<S>& g_gain, VecX<S>& g_bias) {
    g_gain += (g_out.array() * xhat.array()).colwise().sum().matrix().transpose();
    g_bias += g_out.colwise().sum().transpose();
    const MatX<S> h = (g_out.array().rowwise() * gain.transpose().array()).matrix();
    const VecX<S> mean_h = h.rowwise().mean();
    const VecX<S> mean_hx = (h.array() * xhat.array()).rowwise().mean().matrix();
    g_x += (((h.array().colwise() - mean_h.array()) -
             xhat.array().colwise() * mean_hx.array())
                .colwise() *
            inv_sigma.array())
               .matrix();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear attention

// Kernelized attention with feature map phi(x) = elu(x) + 1:
//   out_i = phi(q_i)^T (sum_j phi(k_j) v_j^T) / (phi(q_i)^T sum_j phi(k_j)).
// Masked rows are excluded from the sums and produce zero rows. Cost is
// linear in the sequence length.
template <class S>
MatX<S> linear_attention(const MatX<S>& q, const MatX<S>& k, const MatX<S>& v,
                         const std::vector<std::uint8_t>* mask) {
    const Eigen::Index n = q.rows(), d = q.cols();
    if (k.rows() != n || v.rows() != n || k.cols() != d || v.cols() != d)
        throw ShapeMismatch("linear_attention: Q/K/V shapes disagree");
    if (mask && static_cast<Eigen::Index>(mask->size()) != n)
        throw ShapeMismatch("linear_attention: mask length mismatch");

    MatX<S> phi_q = detail::apply_phi(q);
    MatX<S> phi_k = detail::apply_phi(k);
    bool any_valid = !mask;
    if (mask) {
        for (Eigen::Index i = 0; i < n; ++i) {
            if ((*mask)[static_cast<std::size_t>(i)])
                any_valid = true;
            else
                phi_k.row(i).setZero();
        }
    }
    if (!any_valid) throw EmptySequence("linear_attention: no valid tokens");

    const MatX<S> kv = phi_k.transpose() * v;              // d x d
    const VecX<S> z = phi_k.colwise().sum().transpose();   // d
    const VecX<S> denom = phi_q * z;
    MatX<S> out = ((phi_q * kv).array().colwise() / denom.array()).matrix();
    if (mask) {
        for (Eigen::Index i = 0; i < n; ++i)
            if (!(*mask)[static_cast<std::size_t>(i)]) out.row(i).setZero();
    }
    return out;
}

// ---------------------------------------------------------------------------
// Transformer block

template <class S>
struct BlockCache {
    MatX<S> xhat1, xhat2;
    VecX<S> inv1, inv2;
    MatX<S> phi_q, phi_k, vproj;   // n x d
    std::vector<MatX<S>> kv;       // per head, dh x dh
    MatX<S> z;                     // dh x n_heads
    MatX<S> denom;                 // n x n_heads
    MatX<S> att;                   // n x d, concatenated head outputs
    MatX<S> f1, a1;                // FFN pre-activation and activation
};

namespace detail {

// Multi-head linear attention over LN'd tokens, including output projection.
// Invalid rows contribute nothing and come out zero.
template <class S>
MatX<S> attention_forward(const MatX<S>& x_ln, const AttentionParams<S>& ap, int n_heads,
                          const std::vector<std::uint8_t>* mask, BlockCache<S>* cache) {
    const Eigen::Index n = x_ln.rows(), d = x_ln.cols();
    const Eigen::Index dh = d / n_heads;

    MatX<S> phi_q = apply_phi(((x_ln * ap.wq).rowwise() + ap.bq.transpose()).eval());
    MatX<S> phi_k = apply_phi(((x_ln * ap.wk).rowwise() + ap.bk.transpose()).eval());
    MatX<S> vproj = (x_ln * ap.wv).rowwise() + ap.bv.transpose();

    bool any_valid = !mask;
    if (mask) {
        for (Eigen::Index i = 0; i < n; ++i) {
            if ((*mask)[static_cast<std::size_t>(i)])
                any_valid = true;
            else
                phi_k.row(i).setZero();
        }
    }
    if (!any_valid) throw EmptySequence("attention: no valid tokens");

    MatX<S> att(n, d);
    std::vector<MatX<S>> kv(static_cast<std::size_t>(n_heads));
    MatX<S> z(dh, n_heads);
    MatX<S> denom(n, n_heads);
    for (int h = 0; h < n_heads; ++h) {
        const auto qh = phi_q.middleCols(h * dh, dh);
        const auto kh = phi_k.middleCols(h * dh, dh);
        const auto vh = vproj.middleCols(h * dh, dh);
        kv[static_cast<std::size_t>(h)] = kh.transpose() * vh;
        z.col(h) = kh.colwise().sum().transpose();
        denom.col(h) = qh * z.col(h);
        att.middleCols(h * dh, dh) =
            ((qh * kv[static_cast<std::size_t>(h)]).array().colwise() / denom.col(h).array())
                .matrix();
    }
    if (mask) {
        for (Eigen::Index i = 0; i < n; ++i)
            if (!(*mask)[static_cast<std::size_t>(i)]) att.row(i).setZero();
    }
    MatX<S> out = (att * ap.wo).rowwise() + ap.bo.transpose();
    if (mask) {
        for (Eigen::Index i = 0; i < n; ++i)
            if (!(*mask)[static_cast<std::size_t>(i)]) out.row(i).setZero();
    }
    if (cache) {
        cache->phi_q = std::move(phi_q);
        cache->phi_k = std::move(phi_k);
        cache->vproj = std::move(vproj);
        cache->kv = std::move(kv);
        cache->z = std::move(z);
        cache->denom = std::move(denom);
        cache->att = std::move(att);
    }
    return out;
}

}  // namespace detail

// Pre-normalization residual block:
//   x + MultiHeadLinearAttention(LN(x)), then + FFN(LN(.)) with GELU.
// Rows outside the mask receive no attention/FFN contribution, so zero
// residual input stays zero.
template <class S>
MatX<S> block_forward(const MatX<S>& x, const BlockParams<S>& bp, int n_heads,
                      const std::vector<std::uint8_t>* mask, BlockCache<S>* cache) {
    BlockCache<S> local;
    BlockCache<S>& c = cache ? *cache : local;

    MatX<S> ln1;
    detail::layer_norm(x, bp.ln1_g, bp.ln1_b, c.xhat1, c.inv1, ln1);
    const MatX<S> ao = detail::attention_forward(ln1, bp.attn, n_heads, mask, cache ? &c : nullptr);
    MatX<S> x2 = x + ao;

    MatX<S> ln2;
    detail::layer_norm(x2, bp.ln2_g, bp.ln2_b, c.xhat2, c.inv2, ln2);
    MatX<S> f1 = (ln2 * bp.w1).rowwise() + bp.b1.transpose();
    MatX<S> a1 = detail::apply_gelu(f1);
    MatX<S> f2 = (a1 * bp.w2).rowwise() + bp.b2.transpose();
    if (mask) {
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            if (!(*mask)[static_cast<std::size_t>(i)]) f2.row(i).setZero();
    }
    if (cache) {
        c.f1 = std::move(f1);
        c.a1 = std::move(a1);
    }
    return x2 + f2;
}

// Spec-shaped wrapper over token grids.
template <class S>
TokenGrid<S> transformer_block(const TokenGrid<S>& tokens, const BlockParams<S>& bp, int n_heads) {
    if (tokens.channels() != bp.ln1_g.size())
        throw ShapeMismatch("transformer_block: token width does not match params");
    TokenGrid<S> out = tokens;
    out.data = block_forward<S>(tokens.data, bp, n_heads, &tokens.mask, nullptr);
    return out;
}

template <class S>
void block_backward(const MatX<S>& g_out, const BlockParams<S>& bp, const BlockCache<S>& c,
                    int n_heads, BlockParams<S>& g_bp, MatX<S>& g_x) {
    const Eigen::Index n = g_out.rows(), d = g_out.cols();
    const Eigen::Index dh = d / n_heads;

    // FFN branch
    MatX<S> g_a1 = g_out * bp.w2.transpose();
    g_bp.w2 += c.a1.transpose() * g_out;
    g_bp.b2 += g_out.colwise().sum().transpose();
    MatX<S> g_f1 = detail::apply_gelu_grad(g_a1, c.f1);
    // w1 consumes the LN2 output, xhat2 .* gain + bias.
    const MatX<S> ln2_out = ((c.xhat2.array().rowwise() * bp.ln2_g.transpose().array()).rowwise() +
                             bp.ln2_b.transpose().array())
                                .matrix();
    g_bp.w1 += ln2_out.transpose() * g_f1;
    g_bp.b1 += g_f1.colwise().sum().transpose();
    MatX<S> g_ln2 = g_f1 * bp.w1.transpose();

    MatX<S> g_x2 = g_out;  // residual
    detail::layer_norm_backward(g_ln2, c.xhat2, c.inv2, bp.ln2_g, g_x2, g_bp.ln2_g, g_bp.ln2_b);

    // Attention branch
    MatX<S> g_ao = g_x2;
    MatX<S> g_att = g_ao * bp.attn.wo.transpose();
    g_bp.attn.wo += c.att.transpose() * g_ao;
    g_bp.attn.bo += g_ao.colwise().sum().transpose();

    MatX<S> g_phi_q(n, d);
    MatX<S> g_phi_k(n, d);
    MatX<S> g_vproj(n, d);
    for (int h = 0; h < n_heads; ++h) {
        const auto qh = c.phi_q.middleCols(h * dh, dh);
        const auto kh = c.phi_k.middleCols(h * dh, dh);
        const auto oh = c.att.middleCols(h * dh, dh);
        const auto gh = g_att.middleCols(h * dh, dh);
        const MatX<S>& kv = c.kv[static_cast<std::size_t>(h)];
        const auto denom_col = c.denom.col(h);

        const MatX<S> g_u = (gh.array().colwise() / denom_col.array()).matrix();
        const VecX<S> g_den =
            (-(gh.array() * oh.array()).rowwise().sum() / denom_col.array()).matrix();
        g_phi_q.middleCols(h * dh, dh) = g_u * kv.transpose() + g_den * c.z.col(h).transpose();
        const MatX<S> g_kv = qh.transpose() * g_u;
        const VecX<S> g_z = qh.transpose() * g_den;
        g_phi_k.middleCols(h * dh, dh) =
            (c.vproj.middleCols(h * dh, dh) * g_kv.transpose()).rowwise() + g_z.transpose();
        g_vproj.middleCols(h * dh, dh) = kh * g_kv;
    }
    // phi'(x) = min(phi(x), 1), recovered from the stored phi values.
    MatX<S> g_q = (g_phi_q.array() * c.phi_q.array().min(S(1))).matrix();
    MatX<S> g_k = (g_phi_k.array() * c.phi_k.array().min(S(1))).matrix();

    const MatX<S> ln1_out = ((c.xhat1.array().rowwise() * bp.ln1_g.transpose().array()).rowwise() +
                             bp.ln1_b.transpose().array())
                                .matrix();
    MatX<S> g_ln1 = g_q * bp.attn.wq.transpose() + g_k * bp.attn.wk.transpose() +
                    g_vproj * bp.attn.wv.transpose();
    g_bp.attn.wq += ln1_out.transpose() * g_q;
    g_bp.attn.bq += g_q.colwise().sum().transpose();
    g_bp.attn.wk += ln1_out.transpose() * g_k;
    g_bp.attn.bk += g_k.colwise().sum().transpose();
    g_bp.attn.wv += ln1_out.transpose() * g_vproj;
    g_bp.attn.bv += g_vproj.colwise().sum().transpose();

    g_x += g_x2;  // residual into the block input
    detail::layer_norm_backward(g_ln1, c.xhat1, c.inv1, bp.ln1_g, g_x, g_bp.ln1_g, g_bp.ln1_b);
}

// ---------------------------------------------------------------------------
// Pose head

template <class S>
struct HeadCache {
    MatX<S> p1, c1v, p2, c2v;
    VecX<S> pooled;
    VecX<S> pm1, m1v, pm2, m2v;
    VecX<S> out;
    DecodeCache<S> decode;
};

// Residual 1x1 channel mixing, masked average pooling, 3-layer MLP.
template <class S>
VecX<S> head_forward(const MatX<S>& tokens, const std::vector<std::uint8_t>* mask,
                     const HeadParams<S>& hp, HeadCache<S>* cache) {
    const Eigen::Index n = tokens.rows();
    Eigen::Index n_valid = n;
    if (mask) {
        n_valid = 0;
        for (auto m : *mask) n_valid += (m != 0);
        if (n_valid == 0) throw EmptySequence("pose_head: no valid tokens");
    }
    if (n == 0) throw EmptySequence("pose_head: empty sequence");

    HeadCache<S> local;
    HeadCache<S>& c = cache ? *cache : local;
    c.p1 = (tokens * hp.c1).rowwise() + hp.d1.transpose();
    c.c1v = detail::apply_gelu(c.p1);
    c.p2 = (c.c1v * hp.c2).rowwise() + hp.d2.transpose();
    c.c2v = detail::apply_gelu(c.p2);
    const MatX<S> res = tokens + ((c.c2v * hp.c3).rowwise() + hp.d3.transpose());

    VecX<S> pooled = VecX<S>::Zero(tokens.cols());
    if (mask) {
        for (Eigen::Index i = 0; i < n; ++i)
            if ((*mask)[static_cast<std::size_t>(i)]) pooled += res.row(i).transpose();
    } else {
        pooled = res.colwise().sum().transpose();
    }
    pooled /= static_cast<S>(n_valid);
    c.pooled = pooled;

    c.pm1 = hp.m1.transpose() * pooled + hp.e1;
    c.m1v = c.pm1.unaryExpr([](S v) { return detail::gelu(v); });
    c.pm2 = hp.m2.transpose() * c.m1v + hp.e2;
    c.m2v = c.pm2.unaryExpr([](S v) { return detail::gelu(v); });
    c.out = hp.m3.transpose() * c.m2v + hp.e3;
    return c.out;
}

// Spec-shaped wrapper.
template <class S>
VecX<S> pose_head(const TokenGrid<S>& tokens, const HeadParams<S>& hp) {
    return head_forward<S>(tokens.data, &tokens.mask, hp, nullptr);
}

template <class S>
void head_backward(const VecX<S>& g_out, const MatX<S>& tokens, const HeadParams<S>& hp,
                   const HeadCache<S>& c, HeadParams<S>& g_hp, MatX<S>& g_tokens) {
    const Eigen::Index n = tokens.rows();

    g_hp.m3 += c.m2v * g_out.transpose();
    g_hp.e3 += g_out;
    VecX<S> g_m2v = hp.m3 * g_out;
    VecX<S> g_pm2 = g_m2v.binaryExpr(c.pm2, [](S g, S x) { return g * detail::gelu_grad(x); });
    g_hp.m2 += c.m1v * g_pm2.transpose();
    g_hp.e2 += g_pm2;
    VecX<S> g_m1v = hp.m2 * g_pm2;
    VecX<S> g_pm1 = g_m1v.binaryExpr(c.pm1, [](S g, S x) { return g * detail::gelu_grad(x); });
    g_hp.m1 += c.pooled * g_pm1.transpose();
    g_hp.e1 += g_pm1;
    const VecX<S> g_pooled = hp.m1 * g_pm1;

    // pooled = mean over rows of (tokens + conv-out)
    const S inv_n = S(1) / static_cast<S>(n);
    const Eigen::RowVectorX<S> g_row = (g_pooled * inv_n).transpose();
    MatX<S> g_res = VecX<S>::Ones(n) * g_row;

    g_tokens += g_res;  // skip path
    MatX<S> g_c2v = g_res * hp.c3.transpose();
    g_hp.c3 += c.c2v.transpose() * g_res;
    g_hp.d3 += g_res.colwise().sum().transpose();
    MatX<S> g_p2 = detail::apply_gelu_grad(g_c2v, c.p2);
    g_hp.c2 += c.c1v.transpose() * g_p2;
    g_hp.d2 += g_p2.colwise().sum().transpose();
    MatX<S> g_c1v = g_p2 * hp.c2.transpose();
    MatX<S> g_p1 = detail::apply_gelu_grad(g_c1v, c.p1);
    g_hp.c1 += tokens.transpose() * g_p1;
    g_hp.d1 += g_p1.colwise().sum().transpose();
    g_tokens += g_p1 * hp.c1.transpose();
}

// ---------------------------------------------------------------------------
// Re-attention stack (spec-shaped, on token grids)

template <class S>
struct StackResult {
    TokenGrid<S> final_tokens;
    std::vector<TokenGrid<S>> group_outputs;
};

// Groups of group_size blocks; with re-attention enabled each group output
// adds back the fused encoding input x0 (or the group's own input when the
// alternative wiring is selected).
template <class S>
StackResult<S> reattention_stack(const TokenGrid<S>& x0, const std::vector<BlockParams<S>>& blocks,
                                 const RegressorConfig& cfg) {
    cfg.check();
    if (static_cast<int>(blocks.size()) != cfg.n_blocks)
        throw ShapeMismatch("reattention_stack: block count mismatch");
    StackResult<S> result;
    TokenGrid<S> y = x0;
    for (int g = 0; g < cfg.n_groups(); ++g) {
        const MatX<S> group_in = y.data;
        for (int b = 0; b < cfg.group_size; ++b) {
            const auto& bp = blocks[static_cast<std::size_t>(g * cfg.group_size + b)];
            y.data = block_forward<S>(y.data, bp, cfg.n_heads, &y.mask, nullptr);
        }
        if (cfg.enable_reattention)
            y.data += cfg.reinject_group_input ? group_in : x0.data;
        result.group_outputs.push_back(y);
    }
    result.final_tokens = y;
    return result;
}

// ---------------------------------------------------------------------------
// Full forward

template <class S>
struct ForwardCache {
    std::vector<int> valid_idx;
    int grid_h = 0, grid_w = 0;
    MatX<S> rawc;                    // n x 3(2m+1)
    MatX<S> x0;                      // n x d
    std::vector<MatX<S>> group_in;   // only kept for the alternative wiring
    std::vector<MatX<S>> group_out;
    std::vector<BlockCache<S>> blocks;
    std::vector<HeadCache<S>> heads;
};

struct ForwardResult {
    geometry::Pose pose;                    // final prediction
    Eigen::VectorXd vec;                    // raw head output
    std::vector<geometry::Pose> aux_poses;  // intermediate heads (training mode)
    std::vector<Eigen::VectorXd> aux_vecs;
};

namespace detail {

// Compacted token construction: fused positional encoding restricted to the
// valid cells, identical to fuse(pe2d, pe3d) rows at those cells.
template <class S>
void build_tokens(const SceneCoordinateMap& scm, const geometry::Intrinsics& k,
                  const RegressorConfig& cfg, const ModelParams<S>& params, ForwardCache<S>& c) {
    scm.check_consistent();
    c.grid_h = scm.h;
    c.grid_w = scm.w;
    c.valid_idx.clear();
    for (int i = 0; i < scm.size(); ++i)
        if (scm.mask[static_cast<std::size_t>(i)]) c.valid_idx.push_back(i);
    if (c.valid_idx.empty()) throw EmptySequence("forward: map has no valid cells");
    const int n = static_cast<int>(c.valid_idx.size());
    const int raw_ch = 3 * (2 * cfg.freq_bands + 1);

    const encoding::EncodingConfig ecfg = cfg.encoding();
    c.rawc.resize(n, raw_ch);
    MatX<S> pe2c(n, cfg.d_model);

    std::vector<double> x_rays(static_cast<std::size_t>(scm.w));
    std::vector<double> y_rays(static_cast<std::size_t>(scm.h));
    if (cfg.enable_dynamic_pe) {
        for (int u = 0; u < scm.w; ++u) {
            double xr, yr;
            geometry::ray_xy(k, u, 0.0, xr, yr);
            x_rays[static_cast<std::size_t>(u)] = xr;
        }
        for (int v = 0; v < scm.h; ++v) {
            double xr, yr;
            geometry::ray_xy(k, 0.0, v, xr, yr);
            y_rays[static_cast<std::size_t>(v)] = yr;
        }
    } else {
        for (int u = 0; u < scm.w; ++u)
            x_rays[static_cast<std::size_t>(u)] =
                encoding::EncodingConfig::kLambda * (u - scm.w / 2.0) / scm.w;
        for (int v = 0; v < scm.h; ++v)
            y_rays[static_cast<std::size_t>(v)] =
                encoding::EncodingConfig::kLambda * (v - scm.h / 2.0) / scm.h;
    }

    for (int row = 0; row < n; ++row) {
        const int idx = c.valid_idx[static_cast<std::size_t>(row)];
        const int v = idx / scm.w, u = idx % scm.w;
        encoding::detail::pe2d_cell(x_rays[static_cast<std::size_t>(u)],
                                    y_rays[static_cast<std::size_t>(v)], ecfg.d_model,
                                    pe2c.row(row).data());
        S* out = c.rawc.row(row).data();
        for (int ch = 0; ch < 3; ++ch) out[ch] = static_cast<S>(scm.coords(idx, ch));
        double scale = std::numbers::pi;
        for (int j = 0; j < cfg.freq_bands; ++j) {
            for (int ch = 0; ch < 3; ++ch) {
                out[3 + 6 * j + ch] = static_cast<S>(std::sin(scale * scm.coords(idx, ch)));
                out[6 + 6 * j + ch] = static_cast<S>(std::cos(scale * scm.coords(idx, ch)));
            }
            scale *= 2.0;
        }
    }
    c.x0 = c.rawc * params.pe_w;
    c.x0.rowwise() += params.pe_b.transpose();
    c.x0 += pe2c;
}

}  // namespace detail

// Runs the stack over the compacted valid tokens and applies the pose heads.
// In training mode every group head is evaluated; otherwise only the last.
// Returns the raw head vectors, last head last.
template <class S>
std::vector<VecX<S>> forward_cached(const SceneCoordinateMap& scm, const geometry::Intrinsics& k,
                                    const RegressorConfig& cfg, const ModelParams<S>& params,
                                    bool training, ForwardCache<S>& cache) {
    cfg.check();
    if (static_cast<int>(params.blocks.size()) != cfg.n_blocks ||
        static_cast<int>(params.heads.size()) != cfg.n_groups() ||
        params.pe_w.rows() != 3 * (2 * cfg.freq_bands + 1) || params.pe_w.cols() != cfg.d_model)
        throw ShapeMismatch("forward: params do not match config");

    detail::build_tokens(scm, k, cfg, params, cache);
    const int n_groups = cfg.n_groups();
    cache.blocks.assign(static_cast<std::size_t>(cfg.n_blocks), BlockCache<S>{});
    cache.heads.assign(static_cast<std::size_t>(n_groups), HeadCache<S>{});
    cache.group_out.assign(static_cast<std::size_t>(n_groups), MatX<S>{});
    cache.group_in.clear();

    MatX<S> y = cache.x0;
    for (int g = 0; g < n_groups; ++g) {
        if (cfg.enable_reattention && cfg.reinject_group_input) cache.group_in.push_back(y);
        for (int b = 0; b < cfg.group_size; ++b) {
            const int bi = g * cfg.group_size + b;
            y = block_forward<S>(y, params.blocks[static_cast<std::size_t>(bi)], cfg.n_heads,
                                 nullptr, &cache.blocks[static_cast<std::size_t>(bi)]);
        }
        if (cfg.enable_reattention)
            y += cfg.reinject_group_input ? cache.group_in[static_cast<std::size_t>(g)] : cache.x0;
        cache.group_out[static_cast<std::size_t>(g)] = y;
    }

    std::vector<VecX<S>> outs;
    for (int g = 0; g < n_groups; ++g) {
        if (!training && g + 1 < n_groups) continue;
        outs.push_back(head_forward<S>(cache.group_out[static_cast<std::size_t>(g)], nullptr,
                                       params.heads[static_cast<std::size_t>(g)],
                                       &cache.heads[static_cast<std::size_t>(g)]));
    }
    return outs;
}

// Public forward: map + intrinsics -> metric pose (plus intermediate-head
// poses in training mode). Decoding runs in double regardless of S.
template <class S>
ForwardResult forward(const SceneCoordinateMap& scm, const geometry::Intrinsics& k,
                      const ModelParams<S>& params, const RegressorConfig& cfg, bool training) {
    ForwardCache<S> cache;
    const std::vector<VecX<S>> outs = forward_cached(scm, k, cfg, params, training, cache);

    ForwardResult result;
    auto decode = [&](const VecX<S>& v) {
        const Eigen::VectorXd vd = v.template cast<double>();
        Eigen::Matrix3d r;
        Eigen::Vector3d t;
        decode_pose<double>(vd, cfg.rotation_repr, r, t, nullptr);
        geometry::Pose p;
        p.R = r;
        p.t = t;
        return std::make_pair(p, vd);
    };
    for (std::size_t i = 0; i + 1 < outs.size(); ++i) {
        auto [p, v] = decode(outs[i]);
        result.aux_poses.push_back(p);
        result.aux_vecs.push_back(v);
    }
    auto [p, v] = decode(outs.back());
    result.pose = p;
    result.vec = v;
    return result;
}

// Reverse pass over the cached forward. g_heads holds d(loss)/d(head vector)
// for every group head (training layout). Gradients accumulate into g_params.
template <class S>
void backward(const RegressorConfig& cfg, const ModelParams<S>& params,
              const ForwardCache<S>& cache, const std::vector<VecX<S>>& g_heads,
              ModelParams<S>& g_params) {
    const int n_groups = cfg.n_groups();
    if (static_cast<int>(g_heads.size()) != n_groups)
        throw ShapeMismatch("backward: expected one gradient per group head");
    const Eigen::Index n = cache.x0.rows();
    const Eigen::Index d = cache.x0.cols();

    std::vector<MatX<S>> g_group(static_cast<std::size_t>(n_groups));
    for (int g = 0; g < n_groups; ++g) {
        g_group[static_cast<std::size_t>(g)] = MatX<S>::Zero(n, d);
        head_backward<S>(g_heads[static_cast<std::size_t>(g)],
                         cache.group_out[static_cast<std::size_t>(g)],
                         params.heads[static_cast<std::size_t>(g)],
                         cache.heads[static_cast<std::size_t>(g)],
                         g_params.heads[static_cast<std::size_t>(g)],
                         g_group[static_cast<std::size_t>(g)]);
    }

    MatX<S> g = MatX<S>::Zero(n, d);
    MatX<S> g_x0 = MatX<S>::Zero(n, d);
    for (int grp = n_groups - 1; grp >= 0; --grp) {
        g += g_group[static_cast<std::size_t>(grp)];
        MatX<S> g_res;
        if (cfg.enable_reattention) {
            if (cfg.reinject_group_input)
                g_res = g;
            else
                g_x0 += g;
        }
        for (int b = cfg.group_size - 1; b >= 0; --b) {
            const int bi = grp * cfg.group_size + b;
            MatX<S> g_in = MatX<S>::Zero(n, d);
            block_backward<S>(g, params.blocks[static_cast<std::size_t>(bi)],
                              cache.blocks[static_cast<std::size_t>(bi)], cfg.n_heads,
                              g_params.blocks[static_cast<std::size_t>(bi)], g_in);
            g = std::move(g_in);
        }
        if (cfg.enable_reattention && cfg.reinject_group_input) g += g_res;
    }
    g_x0 += g;

    g_params.pe_w += cache.rawc.transpose() * g_x0;
    g_params.pe_b += g_x0.colwise().sum().transpose();
}

}  // namespace marepo::model

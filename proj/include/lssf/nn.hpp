#pragma once

// Structural blocks: conv unit, stem, booster encoder/decoder blocks, and
// the sigmoid output head.

#include <random>
#include <string>
#include <utility>

#include "lssf/ops.hpp"
#include "lssf/params.hpp"

namespace lssf {

// ---- init -------------------------------------------------------------------

template <typename T>
void init_conv(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int k, int cin, int cout,
               bool bias = true) {
    ps.add(prefix + ".k", he_normal<T>({k, k, cin, cout}, rng));
    if (bias) ps.add(prefix + ".b", Tensor<T>::zeros({cout}));
}

template <typename T>
void init_bn(ParamStore<T>& ps, const std::string& prefix, int c) {
    ps.add(prefix + ".g", Tensor<T>::full({c}, T(1)));
    ps.add(prefix + ".be", Tensor<T>::zeros({c}));
    ps.add(prefix + ".rm", Tensor<T>::zeros({c}), false);
    ps.add(prefix + ".rv", Tensor<T>::full({c}, T(1)), false);
}

// conv -> BN -> ReLU
template <typename T>
void init_conv_unit(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int k, int cin, int cout) {
    init_conv(ps, rng, prefix, k, cin, cout);
    init_bn(ps, prefix + ".bn", cout);
}

template <typename T>
void init_stem(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int cin, int c) {
    init_conv_unit(ps, rng, prefix + ".s0", 3, cin, c);
    init_conv_unit(ps, rng, prefix + ".e1", 3, c, c);
    init_conv_unit(ps, rng, prefix + ".e2", 3, c, c);
}

// Dual-branch booster encoder block: skip unit plus two parallel paths whose
// sum feeds ReLU and maxpool.
template <typename T>
void init_encoder_block(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int cin, int cout) {
    init_conv_unit(ps, rng, prefix + ".skip", 3, cin, cout);
    init_conv(ps, rng, prefix + ".b1", 3, cout, cout);
    init_bn(ps, prefix + ".b1bn", cout);
    init_conv(ps, rng, prefix + ".b2", 3, cout, cout);
    init_bn(ps, prefix + ".b2bn", cout);
    init_conv_unit(ps, rng, prefix + ".a1", 3, cin, cout);
    init_conv_unit(ps, rng, prefix + ".a2", 3, cout, cout);
    init_conv(ps, rng, prefix + ".a3", 3, cout, cout);
}

template <typename T>
void init_decoder_block(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int cin, int cout) {
    init_conv_unit(ps, rng, prefix + ".fuse", 3, cin, cout);
    init_conv_unit(ps, rng, prefix + ".a1", 3, cin, cout);
    init_conv_unit(ps, rng, prefix + ".a2", 3, cout, cout);
    init_conv(ps, rng, prefix + ".a3", 3, cout, cout);
    init_conv(ps, rng, prefix + ".b1", 3, cout, cout);
    init_bn(ps, prefix + ".b1bn", cout);
    init_conv(ps, rng, prefix + ".b2", 3, cout, cout);
    init_bn(ps, prefix + ".b2bn", cout);
}

template <typename T>
void init_output_head(ParamStore<T>& ps, std::mt19937_64& rng, const std::string& prefix, int c) {
    init_conv_unit(ps, rng, prefix + ".pre", 3, c, c);
    init_conv(ps, rng, prefix + ".fin", 1, c, 1);
}

// ---- apply ------------------------------------------------------------------

template <typename T>
Var apply_conv(Ctx<T>& ctx, Var x, const std::string& prefix, int stride = 1, Padding pad = Padding::Same) {
    Var bias = ctx.params.has(prefix + ".b") ? ctx.p(prefix + ".b") : Var{};
    return conv2d(ctx.tape, x, ctx.p(prefix + ".k"), bias, stride, pad);
}

template <typename T>
Var apply_bn(Ctx<T>& ctx, Var x, const std::string& prefix) {
    return batch_norm(ctx.tape, x, ctx.p(prefix + ".g"), ctx.p(prefix + ".be"), &ctx.params.at(prefix + ".rm"),
                      &ctx.params.at(prefix + ".rv"), ctx.mode);
}

template <typename T>
Var conv_unit(Ctx<T>& ctx, Var x, const std::string& prefix) {
    return relu(ctx.tape, apply_bn(ctx, apply_conv(ctx, x, prefix), prefix + ".bn"));
}

// s0 = unit(x); e0 = maxpool(unit(unit(s0)))
template <typename T>
std::pair<Var, Var> initial_stem(Ctx<T>& ctx, Var x, const std::string& prefix) {
    Var s0 = conv_unit(ctx, x, prefix + ".s0");
    Var e0 = maxpool2(ctx.tape, conv_unit(ctx, conv_unit(ctx, s0, prefix + ".e1"), prefix + ".e2"));
    return {s0, e0};
}

// s_k = unit(e_prev)
// e_k = maxpool(relu( BN(conv(BN(conv(s_k)))) + conv(unit(unit(e_prev))) ))
template <typename T>
std::pair<Var, Var> encoder_block(Ctx<T>& ctx, Var e_prev, const std::string& prefix) {
    Var s_k = conv_unit(ctx, e_prev, prefix + ".skip");
    Var branch_b = apply_bn(ctx, apply_conv(ctx, s_k, prefix + ".b1"), prefix + ".b1bn");
    branch_b = apply_bn(ctx, apply_conv(ctx, branch_b, prefix + ".b2"), prefix + ".b2bn");
    Var branch_a = conv_unit(ctx, e_prev, prefix + ".a1");
    branch_a = conv_unit(ctx, branch_a, prefix + ".a2");
    branch_a = apply_conv(ctx, branch_a, prefix + ".a3");
    Var e_k = maxpool2(ctx.tape, relu(ctx.tape, add(ctx.tape, branch_b, branch_a)));
    return {s_k, e_k};
}

// skip_feat arrives already attention-processed. up = upsample(d_prev);
// fused = skip + unit(up); out = relu( conv(unit(unit(up))) + BN(conv(BN(conv(fused)))) )
template <typename T>
Var decoder_block(Ctx<T>& ctx, Var d_prev, Var skip_feat, const std::string& prefix) {
    Var up = upsample2(ctx.tape, d_prev);
    Var fused = add(ctx.tape, skip_feat, conv_unit(ctx, up, prefix + ".fuse"));
    Var branch_a = conv_unit(ctx, up, prefix + ".a1");
    branch_a = conv_unit(ctx, branch_a, prefix + ".a2");
    branch_a = apply_conv(ctx, branch_a, prefix + ".a3");
    Var branch_b = apply_bn(ctx, apply_conv(ctx, fused, prefix + ".b1"), prefix + ".b1bn");
    branch_b = apply_bn(ctx, apply_conv(ctx, branch_b, prefix + ".b2"), prefix + ".b2bn");
    return relu(ctx.tape, add(ctx.tape, branch_a, branch_b));
}

// sigmoid(conv1x1(unit(x))), nudged off exact 0/1 so the probability range
// stays open even when the logits saturate in floating point
template <typename T>
Var output_head(Ctx<T>& ctx, Var x, const std::string& prefix) {
    Var p = sigmoid(ctx.tape, apply_conv(ctx, conv_unit(ctx, x, prefix + ".pre"), prefix + ".fin"));
    return clamp(ctx.tape, p, T(1e-6), T(1) - T(1e-6));
}

}  // namespace lssf

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "helm/errors.hpp"
#include "helm/numerics/ops.hpp"
#include "helm/numerics/parameter_store.hpp"

namespace helm {

struct EncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t embed_dim = 32;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_labels = 1;  // M: one class token per hierarchy label

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t seq_len() const { return num_labels + num_patches(); }

  void validate() const {
    if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0)
      throw ValidationError("image_size must be a positive multiple of patch_size");
    if (heads == 0 || embed_dim == 0 || embed_dim % heads != 0)
      throw ValidationError("embed_dim must be divisible by heads");
    if (num_labels < 1) throw ValidationError("encoder needs at least one class token");
    if (channels == 0 || mlp_ratio == 0) throw ValidationError("channels and mlp_ratio must be positive");
  }
};

/// Encoder outputs for a batch. cls: [B, M, d], patches: [B, Np, d],
/// pooled_cls / pooled_patches: [B, d] (means over the token axis).
template <typename T>
struct ForwardBundle {
  Var<T> cls;
  Var<T> patches;
  Var<T> pooled_cls;
  Var<T> pooled_patches;
};

/// Attention probabilities captured per block, [B, heads, S, S] each.
template <typename T>
struct AttentionTrace {
  std::vector<Tensor<T>> weights;
};

/// Rearrange [B, C, H, W] images into [B, Np, C*p*p] flattened patches,
/// patches in row-major grid order, each flattened as (channel, row, col).
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, const EncoderConfig& cfg) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size) {
    throw ValidationError("image batch " + to_string(s) + " does not match encoder config [B," +
                          std::to_string(cfg.channels) + "," + std::to_string(cfg.image_size) + "," +
                          std::to_string(cfg.image_size) + "]");
  }
  const std::size_t b = s[0], c = cfg.channels, n = cfg.image_size, p = cfg.patch_size, g = cfg.grid();
  Tensor<T> out({b, g * g, cfg.patch_dim()});
  std::size_t o = 0;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t gy = 0; gy < g; ++gy)
      for (std::size_t gx = 0; gx < g; ++gx)
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t py = 0; py < p; ++py)
            for (std::size_t px = 0; px < p; ++px)
              out[o++] = images[((bi * c + ci) * n + gy * p + py) * n + gx * p + px];
  return out;
}

/// Register ViT encoder parameters under `prefix`.
template <typename T>
void init_encoder(ParameterStore<T>& params, const EncoderConfig& cfg, Rng& rng, const std::string& prefix = "encoder.") {
  cfg.validate();
  const std::size_t d = cfg.embed_dim, hidden = cfg.mlp_ratio * d;
  constexpr double std_init = 0.02;
  params.add(prefix + "patch_embed.weight", trunc_normal<T>({cfg.patch_dim(), d}, std_init, rng));
  params.add(prefix + "patch_embed.bias", Tensor<T>({d}));
  params.add(prefix + "pos_embed", trunc_normal<T>({cfg.num_patches(), d}, std_init, rng));
  params.add(prefix + "cls_tokens", trunc_normal<T>({cfg.num_labels, d}, std_init, rng));
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    const auto b = prefix + "blocks." + std::to_string(i) + ".";
    params.add(b + "ln1.gamma", Tensor<T>({d}, T(1)));
    params.add(b + "ln1.beta", Tensor<T>({d}));
    params.add(b + "attn.qkv.weight", trunc_normal<T>({d, 3 * d}, std_init, rng));
    params.add(b + "attn.qkv.bias", Tensor<T>({3 * d}));
    params.add(b + "attn.proj.weight", trunc_normal<T>({d, d}, std_init, rng));
    params.add(b + "attn.proj.bias", Tensor<T>({d}));
    params.add(b + "ln2.gamma", Tensor<T>({d}, T(1)));
    params.add(b + "ln2.beta", Tensor<T>({d}));
    params.add(b + "mlp.fc1.weight", trunc_normal<T>({d, hidden}, std_init, rng));
    params.add(b + "mlp.fc1.bias", Tensor<T>({hidden}));
    params.add(b + "mlp.fc2.weight", trunc_normal<T>({hidden, d}, std_init, rng));
    params.add(b + "mlp.fc2.bias", Tensor<T>({d}));
  }
  if (cfg.depth > 0) {
    params.add(prefix + "norm.gamma", Tensor<T>({d}, T(1)));
    params.add(prefix + "norm.beta", Tensor<T>({d}));
  }
}

template <typename T>
Var<T> linear(const Var<T>& x, const ParameterStore<T>& params, const std::string& name) {
  auto& t = x.tape();
  return ops::add(ops::matmul(x, params.on(t, name + ".weight")), params.on(t, name + ".bias"));
}

/// Patch tokens [B, Np, d]: linear projection of each flattened patch plus
/// its learned positional embedding.
template <typename T>
Var<T> patchify(Tape<T>& tape, const Tensor<T>& images, const EncoderConfig& cfg, const ParameterStore<T>& params,
                const std::string& prefix = "encoder.") {
  auto patches = tape.constant(extract_patches(images, cfg));
  return ops::add(linear(patches, params, prefix + "patch_embed"), params.on(tape, prefix + "pos_embed"));
}

/// Pre-norm transformer block over [B, S, d] tokens:
/// x + MHSA(LN(x)), then + MLP(LN(.)).
template <typename T>
Var<T> attention_block(const Var<T>& tokens, const EncoderConfig& cfg, const ParameterStore<T>& params,
                       const std::string& block_prefix, AttentionTrace<T>* trace = nullptr) {
  using namespace ops;
  auto& t = tokens.tape();
  const auto& s = tokens.shape();
  if (s.size() != 3 || s[2] != cfg.embed_dim) throw ValidationError("attention block expects [B, S, d] tokens");
  const std::size_t b = s[0], n = s[1], d = cfg.embed_dim, h = cfg.heads, dh = d / h;

  auto x = layer_norm(tokens, params.on(t, block_prefix + "ln1.gamma"), params.on(t, block_prefix + "ln1.beta"));
  auto qkv = linear(x, params, block_prefix + "attn.qkv");  // [B, S, 3d]
  auto heads_of = [&](std::size_t which) {
    auto part = reshape(slice(qkv, 2, which * d, d), {b, n, h, dh});
    return permute(part, {0, 2, 1, 3});  // [B, h, S, dh]
  };
  auto q = heads_of(0), k = heads_of(1), v = heads_of(2);
  auto scores = scale(matmul(reshape(q, {b * h, n, dh}), reshape(k, {b * h, n, dh}), false, true),
                      T(1) / std::sqrt(static_cast<T>(dh)));
  auto attn = softmax(scores);  // [B*h, S, S]
  if (trace) trace->weights.push_back(attn.value().reshaped({b, h, n, n}));
  auto ctx = matmul(attn, reshape(v, {b * h, n, dh}));                      // [B*h, S, dh]
  ctx = reshape(permute(reshape(ctx, {b, h, n, dh}), {0, 2, 1, 3}), {b, n, d});  // [B, S, d]
  auto y = add(tokens, linear(ctx, params, block_prefix + "attn.proj"));

  auto z = layer_norm(y, params.on(t, block_prefix + "ln2.gamma"), params.on(t, block_prefix + "ln2.beta"));
  z = linear(gelu(linear(z, params, block_prefix + "mlp.fc1")), params, block_prefix + "mlp.fc2");
  return add(y, z);
}

/// Full encoder: [T_cls || T_p] through `depth` blocks, then split back into
/// class-token and patch embeddings.
template <typename T>
ForwardBundle<T> encoder_forward(Tape<T>& tape, const Tensor<T>& images, const EncoderConfig& cfg,
                                 const ParameterStore<T>& params, AttentionTrace<T>* trace = nullptr,
                                 const std::string& prefix = "encoder.") {
  using namespace ops;
  cfg.validate();
  const std::size_t b = images.shape().empty() ? 0 : images.shape()[0];
  const std::size_t m = cfg.num_labels, np = cfg.num_patches(), d = cfg.embed_dim;
  auto patch_tokens = patchify(tape, images, cfg, params, prefix);
  auto cls = expand(params.on(tape, prefix + "cls_tokens"), Shape{b, m, d});
  auto x = concat<T>({cls, patch_tokens}, 1);  // [B, M + Np, d]
  for (std::size_t i = 0; i < cfg.depth; ++i)
    x = attention_block(x, cfg, params, prefix + "blocks." + std::to_string(i) + ".", trace);
  if (cfg.depth > 0) x = layer_norm(x, params.on(tape, prefix + "norm.gamma"), params.on(tape, prefix + "norm.beta"));
  if (!x.value().all_finite()) throw NumericError("non-finite activation in encoder output");
  ForwardBundle<T> out;
  out.cls = slice(x, 1, 0, m);
  out.patches = slice(x, 1, m, np);
  out.pooled_cls = mean(out.cls, 1);
  out.pooled_patches = mean(out.patches, 1);
  return out;
}

}  // namespace helm

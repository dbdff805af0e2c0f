// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "daam/data.hpp"
#include "daam/net.hpp"

namespace daam {

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64 &rng) {
  std::normal_distribution<double> n(0.0,
                                     std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t(std::move(shape));
  for (auto &v : t.data())
    v = n(rng);
  return t;
}

Tensor learnable(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

void track_bn(BatchNorm &bn) {
  bn.gamma.set_requires_grad(true);
  bn.beta.set_requires_grad(true);
}

std::size_t conv_out(std::size_t n, std::size_t stride) {
  // k = 3, padding = 1
  return (n + 2 - 3) / stride + 1;
}

BatchNorm clone_bn(const BatchNorm &bn) {
  BatchNorm out = bn;
  out.gamma = learnable(bn.gamma.clone());
  out.beta = learnable(bn.beta.clone());
  return out;
}

Tensor clone_param(const Tensor &t) { return learnable(t.clone()); }

// Views a single [h, w, c] map as a batch of one.
Tensor as_batch(const Tensor &x) {
  if (x.rank() == 3)
    return reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  return x;
}

} // namespace

std::pair<std::size_t, std::size_t> BackboneConfig::feature_extent() const {
  std::size_t h = image_height, w = image_width;
  for (auto s : strides) {
    h = conv_out(h, s);
    w = conv_out(w, s);
  }
  return {h, w};
}

void BackboneConfig::validate() const {
  auto need = [](bool ok, const std::string &msg) {
    if (!ok)
      throw ConfigError("BackboneConfig: " + msg);
  };
  need(!channels.empty(), "at least one conv block required");
  need(channels.size() == strides.size(),
       "channels and strides must have equal length");
  for (auto c : channels)
    need(c > 0, "channel counts must be positive");
  for (auto s : strides)
    need(s > 0, "strides must be positive");
  need(embed_dim > 0, "embed_dim must be positive");
  need(reduction > 0 && feature_channels() % reduction == 0,
       "feature channels must be divisible by the reduction ratio");
  need(image_height >= 1 && image_width >= 1, "image extents must be positive");
  const auto [h, w] = feature_extent();
  need(h * w >= 2, "feature map must keep at least two spatial positions");
}

std::string param_group(const std::string &name) {
  const auto dot = name.find('.');
  const std::string head = name.substr(0, dot);
  if (head == "head") {
    const auto rest = name.substr(dot + 1);
    return rest.substr(0, rest.find('.'));
  }
  return head;
}

std::vector<NamedTensor> DaamParams::learnable() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    const std::string p = "backbone." + std::to_string(i) + ".";
    out.push_back({p + "kernel", backbone[i].kernel});
    out.push_back({p + "bias", backbone[i].bias});
    out.push_back({p + "bn.gamma", backbone[i].bn.gamma});
    out.push_back({p + "bn.beta", backbone[i].bn.beta});
  }
  out.push_back({"attention.spatial.kernel", spatial_kernel});
  out.push_back({"attention.spatial.bias", spatial_bias});
  out.push_back({"attention.scale.kernel", scale_kernel});
  out.push_back({"attention.scale.bias", scale_bias});
  out.push_back({"attention.channel.w0", channel_w0});
  out.push_back({"attention.channel.w1", channel_w1});
  out.push_back({"dsh.fc", dsh_fc});
  out.push_back({"dsh.bn.gamma", dsh_bn.gamma});
  out.push_back({"dsh.bn.beta", dsh_bn.beta});
  out.push_back({"dsp.fc", dsp_fc});
  out.push_back({"dsp.bn.gamma", dsp_bn.gamma});
  out.push_back({"dsp.bn.beta", dsp_bn.beta});
  out.push_back({"head.occ.w", occ_w});
  out.push_back({"head.occ.b", occ_b});
  out.push_back({"head.src_id.w", src_id_w});
  out.push_back({"head.src_id.b", src_id_b});
  out.push_back({"head.tgt_id.w", tgt_id_w});
  out.push_back({"head.tgt_id.b", tgt_id_b});
  out.push_back({"head.domain.w", domain_w});
  out.push_back({"head.domain.b", domain_b});
  return out;
}

std::vector<DaamParams::Buffer> DaamParams::buffers() {
  std::vector<Buffer> out;
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    const std::string p = "backbone." + std::to_string(i) + ".bn.";
    out.push_back({p + "running_mean", &backbone[i].bn.running_mean});
    out.push_back({p + "running_var", &backbone[i].bn.running_var});
  }
  out.push_back({"dsh.bn.running_mean", &dsh_bn.running_mean});
  out.push_back({"dsh.bn.running_var", &dsh_bn.running_var});
  out.push_back({"dsp.bn.running_mean", &dsp_bn.running_mean});
  out.push_back({"dsp.bn.running_var", &dsp_bn.running_var});
  return out;
}

DaamParams DaamParams::clone() const {
  DaamParams out;
  out.config = config;
  for (const auto &b : backbone)
    out.backbone.push_back(
        {clone_param(b.kernel), clone_param(b.bias), clone_bn(b.bn), b.stride});
  out.spatial_kernel = clone_param(spatial_kernel);
  out.spatial_bias = clone_param(spatial_bias);
  out.scale_kernel = clone_param(scale_kernel);
  out.scale_bias = clone_param(scale_bias);
  out.channel_w0 = clone_param(channel_w0);
  out.channel_w1 = clone_param(channel_w1);
  out.dsh_fc = clone_param(dsh_fc);
  out.dsh_bn = clone_bn(dsh_bn);
  out.dsp_fc = clone_param(dsp_fc);
  out.dsp_bn = clone_bn(dsp_bn);
  out.occ_w = clone_param(occ_w);
  out.occ_b = clone_param(occ_b);
  out.src_id_w = clone_param(src_id_w);
  out.src_id_b = clone_param(src_id_b);
  out.tgt_id_w = clone_param(tgt_id_w);
  out.tgt_id_b = clone_param(tgt_id_b);
  out.domain_w = clone_param(domain_w);
  out.domain_b = clone_param(domain_b);
  return out;
}

DaamParams init_params(const BackboneConfig &config, const HeadSizes &heads,
                       std::uint64_t seed) {
  config.validate();
  if (heads.n_source_ids < 1 || heads.n_clusters < 1)
    throw ConfigError("head sizes must be positive");
  std::mt19937_64 rng(seed);
  DaamParams p;
  p.config = config;
  std::size_t cin = 3;
  for (std::size_t i = 0; i < config.channels.size(); ++i) {
    const std::size_t cout = config.channels[i];
    ConvBlock b;
    b.kernel = learnable(he_normal({3, 3, cin, cout}, 9 * cin, rng));
    b.bias = learnable(Tensor({cout}));
    b.bn = BatchNorm(cout);
    track_bn(b.bn);
    b.stride = config.strides[i];
    p.backbone.push_back(std::move(b));
    cin = cout;
  }
  const std::size_t c = config.feature_channels();
  const std::size_t cr = c / config.reduction;
  const std::size_t d = config.embed_dim;
  p.spatial_kernel = learnable(he_normal({3, 3, 1, 1}, 9, rng));
  p.spatial_bias = learnable(Tensor({1}));
  p.scale_kernel = learnable(he_normal({1, 1, 1, 1}, 1, rng));
  p.scale_bias = learnable(Tensor({1}));
  p.channel_w0 = learnable(he_normal({cr, c}, c, rng));
  p.channel_w1 = learnable(he_normal({c, cr}, cr, rng));
  p.dsh_fc = learnable(he_normal({c, d}, c, rng));
  p.dsh_bn = BatchNorm(d);
  track_bn(p.dsh_bn);
  p.dsp_fc = learnable(he_normal({c, d}, c, rng));
  p.dsp_bn = BatchNorm(d);
  track_bn(p.dsp_bn);
  p.occ_w = learnable(he_normal({d, 1}, d, rng));
  p.occ_b = learnable(Tensor({1}));
  p.src_id_w = learnable(he_normal({d, heads.n_source_ids}, d, rng));
  p.src_id_b = learnable(Tensor({heads.n_source_ids}));
  p.domain_w = learnable(he_normal({d, 2}, d, rng));
  p.domain_b = learnable(Tensor({2}));
  reinit_target_head(p, heads.n_clusters, rng);
  return p;
}

void reinit_target_head(DaamParams &params, std::size_t n_clusters,
                        std::mt19937_64 &rng) {
  if (n_clusters < 1)
    throw ConfigError("target head needs at least one cluster");
  const std::size_t d = params.config.embed_dim;
  params.tgt_id_w = learnable(he_normal({d, n_clusters}, d, rng));
  params.tgt_id_b = learnable(Tensor({n_clusters}));
}

// ---------------------------------------------------------------------------

Tensor backbone_forward(const Tensor &images, DaamParams &params, Mode mode) {
  const auto &cfg = params.config;
  const std::size_t h = images.rank() == 4 ? images.dim(1) : images.dim(0);
  const std::size_t w = images.rank() == 4 ? images.dim(2) : images.dim(1);
  if (h != cfg.image_height || w != cfg.image_width)
    throw ConfigError("backbone: image extents " + shape_str(images.shape()) +
                      " differ from configured " +
                      std::to_string(cfg.image_height) + "x" +
                      std::to_string(cfg.image_width));
  Tensor x = images;
  for (auto &block : params.backbone) {
    x = conv2d(x, block.kernel, block.stride, 1);
    x = add(x, block.bias);
    x = batchnorm(x, block.bn, mode == Mode::train);
    x = relu(x);
  }
  return x;
}

Tensor spatial_attention(const Tensor &F, const DaamParams &params) {
  if (F.rank() != 3 && F.rank() != 4)
    throw DimensionError("spatial_attention: expected [h,w,c] or [n,h,w,c], got " +
                         shape_str(F.shape()));
  const bool batched = F.rank() == 4;
  const std::size_t h = F.dim(batched ? 1 : 0), w = F.dim(batched ? 2 : 1);
  Tensor s = avg_pool_channels(F);
  s = add(conv2d(s, params.spatial_kernel, 2, 1), params.spatial_bias);
  s = upsample_nearest(s, h, w);
  return add(conv2d(s, params.scale_kernel, 1, 0), params.scale_bias);
}

Tensor channel_attention(const Tensor &F, const Tensor &w0, const Tensor &w1) {
  Tensor g = global_avg_pool_spatial(F);
  if (g.rank() == 1)
    g = reshape(g, {1, g.dim(0)});
  if (w0.rank() != 2 || w1.rank() != 2 || w0.dim(1) != g.dim(1) ||
      w1.dim(1) != w0.dim(0) || w1.dim(0) != g.dim(1))
    throw DimensionError("channel_attention: W0 " + shape_str(w0.shape()) +
                         " / W1 " + shape_str(w1.shape()) +
                         " incompatible with " + std::to_string(g.dim(1)) +
                         " channels");
  Tensor hidden = relu(matmul(g, transpose(w0)));
  return relu(matmul(hidden, transpose(w1)));
}

AttentionOutput attention_forward(const Tensor &F, const DaamParams &params,
                                  bool enabled) {
  Tensor Fb = as_batch(F);
  const std::size_t n = Fb.dim(0), c = Fb.dim(3);
  AttentionOutput out;
  if (enabled) {
    out.spatial = spatial_attention(Fb, params);
    out.channel = channel_attention(Fb, params.channel_w0, params.channel_w1);
    out.raw = mul(out.spatial, reshape(out.channel, {n, 1, 1, c}));
    out.A = sigmoid(out.raw);
  } else {
    out.spatial = Tensor({n, Fb.dim(1), Fb.dim(2), 1});
    out.channel = Tensor({n, c});
    out.raw = Tensor(Fb.shape());
    out.A = Tensor(Fb.shape(), 0.5);
  }
  out.F_sh = mul(out.A, Fb);
  out.F_sp = sub(Fb, out.F_sh);
  return out;
}

namespace {
Tensor project_branch(const Tensor &F_part, const Tensor &fc, BatchNorm &bn,
                      Mode mode) {
  Tensor g = global_avg_pool_spatial(F_part);
  if (g.rank() == 1)
    g = reshape(g, {1, g.dim(0)});
  return relu(batchnorm(matmul(g, fc), bn, mode == Mode::train));
}
} // namespace

Tensor dsh_branch(const Tensor &F_sh, DaamParams &params, Mode mode) {
  return project_branch(F_sh, params.dsh_fc, params.dsh_bn, mode);
}

Tensor dsp_branch(const Tensor &F_sp, DaamParams &params, Mode mode) {
  return project_branch(F_sp, params.dsp_fc, params.dsp_bn, mode);
}

HeadOutputs heads_forward(const Tensor &f_sh, const Tensor *f_sp,
                          const DaamParams &params) {
  HeadOutputs out;
  out.p_occ = sigmoid(add(matmul(f_sh, params.occ_w), params.occ_b));
  out.p_src_id = softmax(add(matmul(f_sh, params.src_id_w), params.src_id_b));
  out.p_tgt_id = softmax(add(matmul(f_sh, params.tgt_id_w), params.tgt_id_b));
  if (f_sp != nullptr)
    out.p_domain =
        softmax(add(matmul(*f_sp, params.domain_w), params.domain_b));
  return out;
}

ForwardArtifacts forward(const Tensor &images, DaamParams &params,
                         const ForwardOptions &options) {
  ForwardArtifacts out;
  out.F = backbone_forward(as_batch(images), params, options.mode);
  out.attention = attention_forward(out.F, params, options.attention);
  out.f_sh = dsh_branch(out.attention.F_sh, params, options.mode);
  out.has_domain_specific = options.domain_specific;
  if (options.domain_specific) {
    out.f_sp = dsp_branch(out.attention.F_sp, params, options.mode);
    out.heads = heads_forward(out.f_sh, &out.f_sp, params);
  } else {
    out.heads = heads_forward(out.f_sh, nullptr, params);
  }
  return out;
}

} // namespace daam

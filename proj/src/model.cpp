#include "prognet/model.hpp"

#include <cmath>
#include <stdexcept>

namespace prognet {

void ModelConfig::validate() const {
  if (cnn_channels.empty()) throw std::invalid_argument("config: cnn_channels must be non-empty");
  if (token_width != cnn_channels.back())
    throw std::invalid_argument("config: token_width " + std::to_string(token_width) +
                                " must equal the last cnn channel count " +
                                std::to_string(cnn_channels.back()));
  if (heads < 1) throw std::invalid_argument("config: heads must be >= 1");
  if (token_width % heads != 0)
    throw std::invalid_argument("config: token_width " + std::to_string(token_width) +
                                " not divisible by " + std::to_string(heads) + " heads");
  if ((token_width + context_width) % heads != 0)
    throw std::invalid_argument("config: fused width " + std::to_string(token_width + context_width) +
                                " not divisible by " + std::to_string(heads) + " heads");
  if (horizons < 1) throw std::invalid_argument("config: horizons must be >= 1");
  if (depth_diagnosis < 0 || depth_prognosis < 0)
    throw std::invalid_argument("config: encoder depth must be >= 0");
  if (n_classes < 2) throw std::invalid_argument("config: need at least 2 classes");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("config: dropout must be in [0,1)");
  const int ds = downsample();
  if (image_h % ds != 0 || image_w % ds != 0)
    throw std::invalid_argument("config: image dims " + std::to_string(image_h) + "x" +
                                std::to_string(image_w) + " must be multiples of the CNN downsample " +
                                std::to_string(ds));
  if (tokens() + 1 < horizons)
    throw std::invalid_argument("config: sequence of " + std::to_string(tokens() + 1) +
                                " tokens cannot feed " + std::to_string(horizons) +
                                " horizon heads; enlarge the image or reduce horizons");
  if (use_clinical && clinical_dim < 1)
    throw std::invalid_argument("config: use_clinical requires clinical_dim >= 1");
}

namespace {

Tensor init_trunc_normal(Shape shape, double sigma, Rng& rng) {
  Tensor t(shape, 0, true);
  for (auto& v : t.data()) v = static_cast<real_t>(rng.truncated_normal(sigma));
  return t;
}

LinearLayer make_linear(int64_t in, int64_t out, Rng& rng, bool zero_init = false) {
  LinearLayer l;
  l.w = zero_init ? Tensor::zeros({in, out}, true) : init_trunc_normal({in, out}, 0.02, rng);
  l.b = Tensor::zeros({out}, true);
  return l;
}

NormLayer make_norm(int64_t width) {
  return {Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
}

ConvLayer make_conv(int64_t cin, int64_t cout, int stride, Rng& rng) {
  ConvLayer c;
  const double sigma = std::sqrt(2.0 / static_cast<double>(cin * 9));
  c.w = init_trunc_normal({cout, cin, 3, 3}, sigma, rng);
  c.b = Tensor::zeros({cout}, true);
  c.stride = stride;
  return c;
}

EncoderBlock make_block(int64_t width, int64_t ffn, Rng& rng) {
  EncoderBlock b;
  b.ln1 = make_norm(width);
  b.wq = make_linear(width, width, rng);
  b.wk = make_linear(width, width, rng);
  b.wv = make_linear(width, width, rng);
  b.wo = make_linear(width, width, rng);
  b.ln2 = make_norm(width);
  b.fc1 = make_linear(width, ffn, rng);
  b.fc2 = make_linear(ffn, width, rng);
  return b;
}

Tensor apply_conv(const ConvLayer& layer, const Tensor& x) {
  return add_chanvec(conv2d(x, layer.w, layer.stride, 1), layer.b);
}

Tensor apply_linear(const LinearLayer& layer, const Tensor& x) {
  return add_rowvec(matmul(x, layer.w), layer.b);
}

}  // namespace

PrognosisModel::PrognosisModel(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng = Rng::substream(seed, 0x1417);

  const int stages = static_cast<int>(cfg_.cnn_channels.size());
  cnn_stem = make_conv(cfg_.image_channels, cfg_.cnn_channels[0], 1, rng);
  for (int s = 0; s < stages; ++s) {
    const int cin = s == 0 ? cfg_.cnn_channels[0] : cfg_.cnn_channels[static_cast<size_t>(s) - 1];
    const int cout = cfg_.cnn_channels[static_cast<size_t>(s)];
    cnn_down.push_back(make_conv(cin, cout, 2, rng));
    std::vector<ConvLayer> blocks;
    for (int bidx = 0; bidx < cfg_.cnn_blocks_per_stage; ++bidx) {
      blocks.push_back(make_conv(cout, cout, 1, rng));
      blocks.push_back(make_conv(cout, cout, 1, rng));
    }
    cnn_blocks.push_back(std::move(blocks));
  }

  const int64_t c = cfg_.token_width, c0 = cfg_.context_width;
  const int64_t t = cfg_.tokens() + 1;
  diag_encoder.cls = init_trunc_normal({1, c}, 0.02, rng);
  diag_encoder.pos = init_trunc_normal({t, c}, 0.02, rng);
  for (int l = 0; l < cfg_.depth_diagnosis; ++l)
    diag_encoder.blocks.push_back(make_block(c, cfg_.ffn_width, rng));
  diag_head = make_linear(c, cfg_.n_classes, rng, /*zero_init=*/true);

  embed_diag = make_linear(cfg_.n_classes, c0, rng);
  if (cfg_.use_clinical) embed_clinical = make_linear(cfg_.clinical_dim, c0, rng);
  context_fc = make_linear(cfg_.use_clinical ? 2 * c0 : c0, c0, rng);
  context_ln = make_norm(c0);

  prog_encoder.pos = init_trunc_normal({t, c + c0}, 0.02, rng);
  for (int l = 0; l < cfg_.depth_prognosis; ++l)
    prog_encoder.blocks.push_back(make_block(c + c0, cfg_.ffn_width, rng));

  for (int k = 0; k < cfg_.horizons; ++k) {
    HorizonHead h;
    h.ln = make_norm(c + c0);
    h.fc1 = make_linear(c + c0, cfg_.ffn_width, rng);
    h.fc2 = make_linear(cfg_.ffn_width, cfg_.horizon_logit_width(), rng, /*zero_init=*/true);
    heads.push_back(std::move(h));
  }

  register_params();
}

void PrognosisModel::register_params() {
  params_.clear();
  auto reg = [&](const std::string& name, const Tensor& t) { params_.push_back({name, t}); };
  auto reg_linear = [&](const std::string& p, const LinearLayer& l) {
    reg(p + ".w", l.w);
    reg(p + ".b", l.b);
  };
  auto reg_norm = [&](const std::string& p, const NormLayer& n) {
    reg(p + ".gain", n.gain);
    reg(p + ".bias", n.bias);
  };
  auto reg_conv = [&](const std::string& p, const ConvLayer& c) {
    reg(p + ".w", c.w);
    reg(p + ".b", c.b);
  };
  auto reg_block = [&](const std::string& p, const EncoderBlock& b) {
    reg_norm(p + ".ln1", b.ln1);
    reg_linear(p + ".q", b.wq);
    reg_linear(p + ".k", b.wk);
    reg_linear(p + ".v", b.wv);
    reg_linear(p + ".o", b.wo);
    reg_norm(p + ".ln2", b.ln2);
    reg_linear(p + ".fc1", b.fc1);
    reg_linear(p + ".fc2", b.fc2);
  };

  reg_conv("cnn.stem", cnn_stem);
  for (size_t s = 0; s < cnn_down.size(); ++s) {
    const std::string sp = "cnn.stage" + std::to_string(s);
    reg_conv(sp + ".down", cnn_down[s]);
    for (size_t b = 0; b < cnn_blocks[s].size(); ++b)
      reg_conv(sp + ".conv" + std::to_string(b), cnn_blocks[s][b]);
  }
  reg("diag.cls", diag_encoder.cls);
  reg("diag.pos", diag_encoder.pos);
  for (size_t l = 0; l < diag_encoder.blocks.size(); ++l)
    reg_block("diag.block" + std::to_string(l), diag_encoder.blocks[l]);
  reg_linear("diag.head", diag_head);
  reg_linear("ctx.embed_diag", embed_diag);
  if (cfg_.use_clinical) reg_linear("ctx.embed_clinical", embed_clinical);
  reg_linear("ctx.fc", context_fc);
  reg_norm("ctx.ln", context_ln);
  reg("prog.pos", prog_encoder.pos);
  for (size_t l = 0; l < prog_encoder.blocks.size(); ++l)
    reg_block("prog.block" + std::to_string(l), prog_encoder.blocks[l]);
  for (size_t k = 0; k < heads.size(); ++k) {
    const std::string hp = "head" + std::to_string(k);
    reg_norm(hp + ".ln", heads[k].ln);
    reg_linear(hp + ".fc1", heads[k].fc1);
    reg_linear(hp + ".fc2", heads[k].fc2);
  }
}

std::vector<Tensor> PrognosisModel::parameter_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

void PrognosisModel::load_parameters(const std::vector<NamedTensor>& named) {
  if (named.size() != params_.size())
    throw std::runtime_error("load_parameters: got " + std::to_string(named.size()) +
                             " tensors, model has " + std::to_string(params_.size()));
  for (size_t i = 0; i < params_.size(); ++i) {
    if (named[i].name != params_[i].name)
      throw std::runtime_error("load_parameters: name mismatch at slot " + std::to_string(i) +
                               ": " + named[i].name + " vs " + params_[i].name);
    if (named[i].tensor.shape() != params_[i].tensor.shape())
      throw std::runtime_error("load_parameters: shape mismatch for " + named[i].name + ": " +
                               shape_str(named[i].tensor.shape()) + " vs " +
                               shape_str(params_[i].tensor.shape()));
    params_[i].tensor.data() = named[i].tensor.data();
  }
}

Tensor PrognosisModel::extract_superpixels(const Tensor& images, const ForwardOptions& opt) {
  (void)opt;
  if (images.ndim() != 4 || images.dim(1) != cfg_.image_channels)
    throw std::invalid_argument("extract_superpixels: want [B," +
                                std::to_string(cfg_.image_channels) + ",H,W], got " +
                                shape_str(images.shape()));
  const int ds = cfg_.downsample();
  if (images.dim(2) % ds != 0 || images.dim(3) % ds != 0)
    throw std::invalid_argument("extract_superpixels: image dims " + shape_str(images.shape()) +
                                " must be multiples of " + std::to_string(ds));
  Tensor x = relu(apply_conv(cnn_stem, images));
  for (size_t s = 0; s < cnn_down.size(); ++s) {
    x = relu(apply_conv(cnn_down[s], x));
    for (size_t b = 0; b + 1 < cnn_blocks[s].size(); b += 2) {
      Tensor y = relu(apply_conv(cnn_blocks[s][b], x));
      y = apply_conv(cnn_blocks[s][b + 1], y);
      x = relu(add(x, y));
    }
  }
  return nchw_to_tokens(x);
}

Tensor PrognosisModel::encoder_block(const EncoderBlock& blk, Tensor h, const ForwardOptions& opt,
                                     std::vector<Tensor>* attention_out) {
  const int64_t b = h.dim(0), t = h.dim(1), d = h.dim(2);
  const int64_t dh = d / cfg_.heads;
  const double rate = cfg_.dropout;

  Tensor a = layer_norm(h, blk.ln1.gain, blk.ln1.bias);
  Tensor q = split_heads(apply_linear(blk.wq, a), cfg_.heads);
  Tensor k = split_heads(apply_linear(blk.wk, a), cfg_.heads);
  Tensor v = split_heads(apply_linear(blk.wv, a), cfg_.heads);
  Tensor scores = scale(matmul_batched(q, k, /*transpose_b=*/true),
                        static_cast<real_t>(1.0 / std::sqrt(static_cast<double>(dh))));
  Tensor attn = softmax(scores, -1);
  if (attention_out)
    attention_out->push_back(reshape(detach(attn), Shape{b, cfg_.heads, t, t}));
  Tensor ctx = merge_heads(matmul_batched(attn, v), cfg_.heads);
  Tensor msa = dropout(apply_linear(blk.wo, ctx), rate, opt.train, opt.rng);
  Tensor z = add(h, msa);  // z = MSA(LN(h)) + h

  Tensor m = layer_norm(z, blk.ln2.gain, blk.ln2.bias);
  m = dropout(gelu(apply_linear(blk.fc1, m)), rate, opt.train, opt.rng);
  m = dropout(apply_linear(blk.fc2, m), rate, opt.train, opt.rng);
  return add(z, m);  // h = MLP(LN(z)) + z
}

Tensor PrognosisModel::encode(const Encoder& enc, const Tensor& seq, const ForwardOptions& opt,
                              std::vector<Tensor>* attention_out) {
  const int64_t b = seq.dim(0);
  Tensor h = seq;
  if (enc.cls.defined()) {
    Tensor cls_b = broadcast_to_batch(enc.cls, b);  // [B,1,D]
    h = concat(cls_b, h, 1);
  }
  if (h.dim(1) != enc.pos.dim(0) || h.dim(2) != enc.pos.dim(1))
    throw std::invalid_argument("encode: sequence " + shape_str(h.shape()) +
                                " does not match positional embedding " + shape_str(enc.pos.shape()));
  h = add(h, broadcast_to_batch(enc.pos, b));
  for (const auto& blk : enc.blocks) h = encoder_block(blk, h, opt, attention_out);
  return h;
}

Tensor PrognosisModel::diagnose(const Tensor& states) {
  Tensor cls_state = reshape(slice(states, 1, 0, 1), Shape{states.dim(0), states.dim(2)});
  return apply_linear(diag_head, cls_state);
}

Tensor PrognosisModel::fuse_context(const Tensor& diag_probs, const Tensor* clinical,
                                    const Tensor& states) {
  if (clinical && !cfg_.use_clinical)
    throw std::invalid_argument("fuse_context: clinical data supplied but use_clinical=false");
  if (cfg_.use_clinical && !clinical)
    throw std::invalid_argument("fuse_context: use_clinical=true but no clinical data given");
  Tensor cat = apply_linear(embed_diag, diag_probs);
  if (clinical) cat = concat(cat, apply_linear(embed_clinical, *clinical), 1);
  Tensor ctx = layer_norm(relu(apply_linear(context_fc, cat)), context_ln.gain, context_ln.bias);
  Tensor rep = repeat_token(ctx, states.dim(1));
  return concat(states, rep, 2);
}

Tensor PrognosisModel::prognose(const Tensor& fused, const ForwardOptions& opt,
                                std::vector<Tensor>* attention_out) {
  const int64_t t = fused.dim(1);
  if (t < cfg_.horizons)
    throw std::invalid_argument("prognose: " + std::to_string(t) + " tokens cannot feed " +
                                std::to_string(cfg_.horizons) +
                                " horizons; enlarge the image or reduce horizons");
  Tensor states = encode(prog_encoder, fused, opt, attention_out);
  const int64_t b = fused.dim(0), d = fused.dim(2);
  Tensor out;
  for (int k = 0; k < cfg_.horizons; ++k) {
    Tensor hk = reshape(slice(states, 1, k, 1), Shape{b, d});
    hk = layer_norm(hk, heads[static_cast<size_t>(k)].ln.gain, heads[static_cast<size_t>(k)].ln.bias);
    hk = gelu(apply_linear(heads[static_cast<size_t>(k)].fc1, hk));
    hk = dropout(hk, cfg_.dropout, opt.train, opt.rng);
    Tensor logits = apply_linear(heads[static_cast<size_t>(k)].fc2, hk);
    logits = reshape(logits, Shape{b, 1, cfg_.horizon_logit_width()});
    out = k == 0 ? logits : concat(out, logits, 1);
  }
  return out;
}

PrognosisOutput PrognosisModel::forward(const Tensor& images, const Tensor* clinical,
                                        const ForwardOptions& opt) {
  if (opt.train && cfg_.dropout > 0 && !opt.rng)
    throw std::invalid_argument("forward: training with dropout needs an rng");
  PrognosisOutput out;
  out.attention_recorded = opt.record_attention;

  Tensor tokens = extract_superpixels(images, opt);
  Tensor states = encode(diag_encoder, tokens, opt,
                         opt.record_attention ? &out.attention_diagnosis : nullptr);
  out.diag_logits = diagnose(states);

  Tensor y0 = softmax(cfg_.detach_y0 ? detach(out.diag_logits) : out.diag_logits, -1);
  if (cfg_.argmax_y0) {
    // ablation: hard one-hot instead of the differentiable distribution
    const auto idx = argmax_last(y0);
    Tensor hard = Tensor::zeros({y0.dim(0), y0.dim(1)});
    for (int64_t i = 0; i < y0.dim(0); ++i)
      hard.at(i * y0.dim(1) + idx[static_cast<size_t>(i)]) = 1;
    y0 = hard;
  }

  Tensor fused = fuse_context(y0, clinical, states);
  out.horizon_logits = prognose(fused, opt,
                                opt.record_attention ? &out.attention_prognosis : nullptr);
  return out;
}

std::vector<Tensor> export_attention(const PrognosisOutput& out) {
  if (!out.attention_recorded)
    throw std::runtime_error("export_attention: forward pass ran without attention recording");
  return out.attention_prognosis;
}

}  // namespace prognet

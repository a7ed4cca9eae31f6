#pragma once

#include <optional>
#include <string>
#include <vector>

#include "prognet/ops.hpp"
#include "prognet/rng.hpp"
#include "prognet/tensor.hpp"

namespace prognet {

struct ModelConfig {
  int image_h = 28, image_w = 28;
  int image_channels = 1;
  std::vector<int> cnn_channels{16, 32, 64, 128};  // one stride-2 stage per entry
  int cnn_blocks_per_stage = 1;                    // residual blocks after each downsample
  int token_width = 128;   // C, must equal cnn_channels.back()
  int context_width = 32;  // C0
  int depth_diagnosis = 2;
  int depth_prognosis = 8;
  int heads = 4;
  int ffn_width = 256;
  int horizons = 4;   // K
  int n_classes = 5;  // stage classes; horizon heads emit n_classes + 2 logits
  double dropout = 0.3;
  bool use_clinical = false;
  int clinical_dim = 0;
  bool detach_y0 = false;  // stop gradients flowing into the diagnosis branch via fusion
  bool argmax_y0 = false;  // feed a one-hot argmax instead of the softmax vector

  int downsample() const { return 1 << cnn_channels.size(); }
  int tokens() const { return (image_h / downsample()) * (image_w / downsample()); }
  int horizon_logit_width() const { return n_classes + 2; }
  void validate() const;
};

struct PrognosisOutput {
  Tensor diag_logits;     // [B, n_classes]
  Tensor horizon_logits;  // [B, K, n_classes+2]; 0..n-1 prognosis, n..n+1 progression
  bool attention_recorded = false;
  std::vector<Tensor> attention_diagnosis;  // per layer, [B, heads, T, T]
  std::vector<Tensor> attention_prognosis;
};

// Per-layer per-head row-stochastic attention maps of the prognosis
// transformer; requires a forward pass run with record_attention.
std::vector<Tensor> export_attention(const PrognosisOutput& out);

struct ForwardOptions {
  bool train = false;
  Rng* rng = nullptr;  // required when train and dropout > 0
  bool record_attention = false;
};

struct LinearLayer {
  Tensor w, b;
};
struct NormLayer {
  Tensor gain, bias;
};
struct ConvLayer {
  Tensor w, b;
  int stride = 1;
};
struct EncoderBlock {
  NormLayer ln1;
  LinearLayer wq, wk, wv, wo;
  NormLayer ln2;
  LinearLayer fc1, fc2;
};
struct Encoder {
  Tensor cls;  // undefined for encoders without a sequence-start token
  Tensor pos;  // [T, D]
  std::vector<EncoderBlock> blocks;
};
struct HorizonHead {
  NormLayer ln;
  LinearLayer fc1, fc2;
};

// Baseline-image prognosis network: CNN super-pixel sequencer, diagnosis
// transformer over tokens with a CLS readout, context fusion of the predicted
// baseline distribution (plus optional clinical data), prognosis transformer,
// and one output head per horizon.
class PrognosisModel {
 public:
  PrognosisModel(ModelConfig cfg, uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  PrognosisOutput forward(const Tensor& images, const Tensor* clinical, const ForwardOptions& opt);

  // Pipeline pieces, exposed individually.
  Tensor extract_superpixels(const Tensor& images, const ForwardOptions& opt);
  Tensor encode(const Encoder& enc, const Tensor& seq, const ForwardOptions& opt,
                std::vector<Tensor>* attention_out);
  Tensor diagnose(const Tensor& states);
  Tensor fuse_context(const Tensor& diag_probs, const Tensor* clinical, const Tensor& states);
  Tensor prognose(const Tensor& fused, const ForwardOptions& opt, std::vector<Tensor>* attention_out);

  std::vector<NamedTensor>& parameters() { return params_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  void load_parameters(const std::vector<NamedTensor>& named);

  // architecture internals, public for white-box tests
  ConvLayer cnn_stem;
  std::vector<ConvLayer> cnn_down;                  // one per stage
  std::vector<std::vector<ConvLayer>> cnn_blocks;   // [stage][2*block]
  Encoder diag_encoder;
  LinearLayer diag_head;
  LinearLayer embed_diag;
  LinearLayer embed_clinical;
  LinearLayer context_fc;
  NormLayer context_ln;
  Encoder prog_encoder;
  std::vector<HorizonHead> heads;

 private:
  Tensor encoder_block(const EncoderBlock& blk, Tensor h, const ForwardOptions& opt,
                       std::vector<Tensor>* attention_out);
  void register_params();

  ModelConfig cfg_;
  std::vector<NamedTensor> params_;
};

}  // namespace prognet

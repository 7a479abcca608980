#include "d2g/model_config.hpp"

#include <algorithm>

namespace d2g {

void ModelConfig::validate() const {
  if (channels < 1 || depth < 1 || kernel_size < 1 || kernel_size % 2 == 0)
    throw Error("ModelConfig: channels, depth and an odd kernel size are required");
  if (setconv_kernel < 1 || setconv_kernel % 2 == 0) throw Error("ModelConfig: setconv kernel must be odd");
  if (!(setconv_epsilon > 0.0) || !(setconv_lengthscale_cells > 0.0)) throw Error("ModelConfig: bad setconv constants");
  if (heads < 1 || head_dim < 1 || fusion_depth < 0 || ff_multiplier < 1 || pair_hidden < 1 || gate_hidden < 1)
    throw Error("ModelConfig: bad attention sizes");
  if (!(bottleneck_dropout >= 0.0 && bottleneck_dropout < 1.0) ||
      !(attention_dropout >= 0.0 && attention_dropout < 1.0))
    throw Error("ModelConfig: dropout must lie in [0, 1)");
  if (timesteps < 1) throw Error("ModelConfig: timesteps must be >= 1");
  const int f = 1 << depth;
  if (grid_height % f != 0 || grid_width % f != 0)
    throw ShapeError("ModelConfig: grid must be divisible by 2^depth");
  if (!(gamma_zero_floor > 0.0)) throw Error("ModelConfig: gamma zero floor must be positive");
  if (std::find(ablation_names().begin(), ablation_names().end(), ablation) == ablation_names().end())
    throw Error("ModelConfig: unknown ablation '" + ablation + "'");
}

namespace {

std::string to_string(Architecture a) { return a == Architecture::Fusion ? "fusion" : "pixel_merge"; }
std::string to_string(AttentionKind a) {
  return a == AttentionKind::TranslationEquivariant ? "translation_equivariant" : "standard";
}

}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
  return {{"channels", c.channels},
          {"depth", c.depth},
          {"kernel_size", c.kernel_size},
          {"bottleneck_dropout", c.bottleneck_dropout},
          {"setconv_kernel", c.setconv_kernel},
          {"setconv_lengthscale_cells", c.setconv_lengthscale_cells},
          {"setconv_epsilon", c.setconv_epsilon},
          {"heads", c.heads},
          {"head_dim", c.head_dim},
          {"fusion_depth", c.fusion_depth},
          {"ff_multiplier", c.ff_multiplier},
          {"attention_dropout", c.attention_dropout},
          {"pair_hidden", c.pair_hidden},
          {"gate_hidden", c.gate_hidden},
          {"timesteps", c.timesteps},
          {"channel_norm", c.channel_norm},
          {"periodic", c.periodic},
          {"architecture", to_string(c.architecture)},
          {"attention", to_string(c.attention)},
          {"use_radar", c.use_radar},
          {"target_inputs", c.target_inputs},
          {"output", d2g::to_string(c.output)},
          {"gamma_zero_floor", c.gamma_zero_floor},
          {"grid_height", c.grid_height},
          {"grid_width", c.grid_width},
          {"ablation", c.ablation}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("channels", c.channels);
  get("depth", c.depth);
  get("kernel_size", c.kernel_size);
  get("bottleneck_dropout", c.bottleneck_dropout);
  get("setconv_kernel", c.setconv_kernel);
  get("setconv_lengthscale_cells", c.setconv_lengthscale_cells);
  get("setconv_epsilon", c.setconv_epsilon);
  get("heads", c.heads);
  get("head_dim", c.head_dim);
  get("fusion_depth", c.fusion_depth);
  get("ff_multiplier", c.ff_multiplier);
  get("attention_dropout", c.attention_dropout);
  get("pair_hidden", c.pair_hidden);
  get("gate_hidden", c.gate_hidden);
  get("timesteps", c.timesteps);
  get("channel_norm", c.channel_norm);
  get("periodic", c.periodic);
  get("use_radar", c.use_radar);
  get("target_inputs", c.target_inputs);
  get("gamma_zero_floor", c.gamma_zero_floor);
  get("grid_height", c.grid_height);
  get("grid_width", c.grid_width);
  get("ablation", c.ablation);
  if (j.contains("architecture")) {
    const auto a = j.at("architecture").get<std::string>();
    if (a == "fusion") c.architecture = Architecture::Fusion;
    else if (a == "pixel_merge") c.architecture = Architecture::PixelMerge;
    else throw FormatError("unknown architecture '" + a + "'");
  }
  if (j.contains("attention")) {
    const auto a = j.at("attention").get<std::string>();
    if (a == "translation_equivariant") c.attention = AttentionKind::TranslationEquivariant;
    else if (a == "standard") c.attention = AttentionKind::Standard;
    else throw FormatError("unknown attention kind '" + a + "'");
  }
  if (j.contains("output")) c.output = output_kind_from_string(j.at("output").get<std::string>());
  c.validate();
  return c;
}

AblationSpec AblationSpec::parse(const std::string& name) {
  if (std::find(ablation_names().begin(), ablation_names().end(), name) == ablation_names().end())
    throw Error("unknown ablation '" + name + "'");
  return {name};
}

ModelConfig apply_ablation(const ModelConfig& base, const AblationSpec& spec) {
  ModelConfig c = base;
  c.ablation = AblationSpec::parse(spec.name).name;
  if (spec.name == "no_bottleneck") c.architecture = Architecture::PixelMerge;
  else if (spec.name == "no_stations") c.timesteps = 1;
  else if (spec.name == "no_radar") c.use_radar = false;
  else if (spec.name == "no_te") c.attention = AttentionKind::Standard;
  else if (spec.name == "target_inputs") c.target_inputs = true;
  else if (spec.name == "gamma") c.output = OutputKind::Gamma;
  else if (spec.name == "gaussian") c.output = OutputKind::Gaussian;
  return c;
}

ModelConfig paper_model_config() {
  ModelConfig c;
  c.grid_height = 96;
  c.grid_width = 96;
  return c;
}

ModelConfig desk_model_config() { return ModelConfig{}; }

}  // namespace d2g

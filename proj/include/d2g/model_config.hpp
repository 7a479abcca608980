#pragma once

#include <string>
#include <vector>

#include "json.hpp"

#include "d2g/distributions.hpp"
#include "d2g/grid.hpp"

namespace d2g {

enum class Architecture { Fusion, PixelMerge };
enum class AttentionKind { TranslationEquivariant, Standard };

// Every switch of the ablation matrix lives here; the model reads nothing else.
struct ModelConfig {
  int channels = 32;
  int depth = 3;
  int kernel_size = 3;
  double bottleneck_dropout = 0.1;

  int setconv_kernel = 9;
  double setconv_lengthscale_cells = 1.0;
  double setconv_epsilon = 1e-8;

  int heads = 8;
  int head_dim = 8;
  int fusion_depth = 2;
  int ff_multiplier = 2;
  double attention_dropout = 0.1;
  int pair_hidden = 16;
  int gate_hidden = 16;

  int timesteps = 4;
  bool channel_norm = false;
  // Circular padding everywhere and wrapped displacements; used for
  // equivariance checks.
  bool periodic = false;

  Architecture architecture = Architecture::Fusion;
  AttentionKind attention = AttentionKind::TranslationEquivariant;
  bool use_radar = true;
  bool target_inputs = false;
  OutputKind output = OutputKind::Zig;
  double gamma_zero_floor = kGammaZeroFloor;

  // Grid the model is built for; only the standard-attention variant depends
  // on it (absolute position embeddings).
  int grid_height = 32;
  int grid_width = 32;

  std::string ablation = "full";

  int bottleneck_height() const { return grid_height >> depth; }
  int bottleneck_width() const { return grid_width >> depth; }
  int projection_width() const { return heads * head_dim; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"full",    "no_bottleneck", "no_stations", "no_radar",
                                              "no_te",   "target_inputs", "gamma",       "gaussian"};
  return names;
}

struct AblationSpec {
  std::string name = "full";
  static AblationSpec parse(const std::string& name);
};

ModelConfig apply_ablation(const ModelConfig& base, const AblationSpec& spec);

// Model shape proposed for the full-size grid.
ModelConfig paper_model_config();
// Same architecture on the small desk grid.
ModelConfig desk_model_config();

}  // namespace d2g

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace rcn {

enum class ModelKind {
  Model1,
  Model2,
  Model3,
  Model4,
  Rcn,
  RcnW,
  RcnS,
  RcnA,
  RcnC,
  RcnF,
  RcnP,
  Custom,
};

/// Where the parameter-free attention unit sits relative to the first
/// recurrent layer.
enum class AttentionPlacement {
  None,
  AfterConv1,
  AtRconvState0,
  AfterRconvState1,
  AfterRconvState2,
  ParallelRconv,
  AfterRconv,
};

inline constexpr AttentionPlacement kAllPlacements[] = {
    AttentionPlacement::None,          AttentionPlacement::AfterConv1,
    AttentionPlacement::AtRconvState0, AttentionPlacement::AfterRconvState1,
    AttentionPlacement::AfterRconvState2, AttentionPlacement::ParallelRconv,
    AttentionPlacement::AfterRconv,
};

std::string_view to_string(ModelKind kind);
std::string_view to_string(AttentionPlacement placement);
ModelKind parse_model_kind(std::string_view name);
AttentionPlacement parse_placement(std::string_view name);

/// Concrete network description. Canonical text form:
///   kind=<name>;M=<int>;K=<int>;C=<int>;R=<int>;wide=<0|1>;shortcut=<0|1>;att=<placement>;dil=1,2,3
/// with optional trailing `states=<n>` and `bn=state` tokens when those differ
/// from their defaults.
struct ArchDescriptor {
  ModelKind kind = ModelKind::Rcn;
  std::size_t feature_maps = 16;
  std::size_t pool_size = 5;
  std::size_t num_classes = 3;
  std::size_t resolution = 60;
  bool conv1_wide = false;
  bool rconv_shortcut = false;
  std::size_t rconv_states = 3;  // recurrent states after state 0
  AttentionPlacement attention = AttentionPlacement::None;
  std::vector<std::size_t> dilations{1, 2, 3};
  bool per_state_bn = false;

  /// Number of stacked recurrent layers (0 for Model 1, 3 for Model 4).
  std::size_t rconv_layers() const;

  std::string to_string() const;
  static ArchDescriptor parse(std::string_view text);
  /// Throws UsageError on inconsistent settings.
  void validate() const;

  bool operator==(const ArchDescriptor&) const = default;
};

/// Descriptor of a named architecture. Model 2 is the RCN backbone and is
/// reported with kind `rcn`.
ArchDescriptor named_descriptor(ModelKind kind, std::size_t feature_maps, std::size_t pool_size,
                                std::size_t num_classes, std::size_t resolution);

/// Channel split of the wide first layer: floor(M/n) per stream, the
/// remainder handed out one channel at a time from the first stream.
std::vector<std::size_t> wide_channel_split(std::size_t feature_maps, std::size_t streams);

/// Re-labels a custom descriptor with the named kind whose flags it matches.
ArchDescriptor canonicalize(ArchDescriptor d);

}  // namespace rcn

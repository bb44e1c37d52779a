#include "rcn/arch.hpp"

#include <array>
#include <charconv>
#include <map>
#include <sstream>

#include "rcn/error.hpp"

namespace rcn {

namespace {

constexpr std::array<std::pair<ModelKind, std::string_view>, 12> kKindNames{{
    {ModelKind::Model1, "model1"},
    {ModelKind::Model2, "model2"},
    {ModelKind::Model3, "model3"},
    {ModelKind::Model4, "model4"},
    {ModelKind::Rcn, "rcn"},
    {ModelKind::RcnW, "rcn-w"},
    {ModelKind::RcnS, "rcn-s"},
    {ModelKind::RcnA, "rcn-a"},
    {ModelKind::RcnC, "rcn-c"},
    {ModelKind::RcnF, "rcn-f"},
    {ModelKind::RcnP, "rcn-p"},
    {ModelKind::Custom, "custom"},
}};

constexpr std::array<std::pair<AttentionPlacement, std::string_view>, 7> kPlacementNames{{
    {AttentionPlacement::None, "none"},
    {AttentionPlacement::AfterConv1, "after_conv1"},
    {AttentionPlacement::AtRconvState0, "at_rconv_state0"},
    {AttentionPlacement::AfterRconvState1, "after_rconv_state1"},
    {AttentionPlacement::AfterRconvState2, "after_rconv_state2"},
    {AttentionPlacement::ParallelRconv, "parallel_rconv"},
    {AttentionPlacement::AfterRconv, "after_rconv"},
}};

std::size_t parse_uint(std::string_view key, std::string_view v) {
  std::size_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw UsageError("descriptor: bad integer for " + std::string(key) + ": '" + std::string(v) + "'");
  }
  return out;
}

bool parse_flag(std::string_view key, std::string_view v) {
  if (v == "0") return false;
  if (v == "1") return true;
  throw UsageError("descriptor: " + std::string(key) + " must be 0 or 1");
}

struct NamedFlags {
  bool wide, shortcut;
  AttentionPlacement att;
};

NamedFlags flags_of(ModelKind kind) {
  using A = AttentionPlacement;
  switch (kind) {
    case ModelKind::RcnW: return {true, false, A::None};
    case ModelKind::RcnS: return {false, true, A::None};
    case ModelKind::RcnA: return {false, false, A::AfterRconv};
    case ModelKind::RcnC: return {true, true, A::AfterConv1};
    case ModelKind::RcnF: return {true, true, A::AtRconvState0};
    case ModelKind::RcnP: return {true, true, A::ParallelRconv};
    default: return {false, false, A::None};
  }
}

}  // namespace

std::string_view to_string(ModelKind kind) {
  for (auto& [k, name] : kKindNames)
    if (k == kind) return name;
  return "custom";
}

std::string_view to_string(AttentionPlacement placement) {
  for (auto& [p, name] : kPlacementNames)
    if (p == placement) return name;
  return "none";
}

ModelKind parse_model_kind(std::string_view name) {
  for (auto& [k, n] : kKindNames)
    if (n == name) return k;
  throw UsageError("unknown model kind '" + std::string(name) + "'");
}

AttentionPlacement parse_placement(std::string_view name) {
  for (auto& [p, n] : kPlacementNames)
    if (n == name) return p;
  throw UsageError("unknown attention placement '" + std::string(name) + "'");
}

std::size_t ArchDescriptor::rconv_layers() const {
  switch (kind) {
    case ModelKind::Model1: return 0;
    case ModelKind::Model3: return 2;
    case ModelKind::Model4: return 3;
    default: return 1;
  }
}

std::string ArchDescriptor::to_string() const {
  std::ostringstream os;
  os << "kind=" << rcn::to_string(kind) << ";M=" << feature_maps << ";K=" << pool_size
     << ";C=" << num_classes << ";R=" << resolution << ";wide=" << (conv1_wide ? 1 : 0)
     << ";shortcut=" << (rconv_shortcut ? 1 : 0) << ";att=" << rcn::to_string(attention)
     << ";dil=";
  for (std::size_t i = 0; i < dilations.size(); ++i) os << (i ? "," : "") << dilations[i];
  if (rconv_states != 3) os << ";states=" << rconv_states;
  if (per_state_bn) os << ";bn=state";
  return os.str();
}

ArchDescriptor ArchDescriptor::parse(std::string_view text) {
  std::map<std::string, std::string, std::less<>> fields;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find(';', pos), text.size());
    const auto token = text.substr(pos, end - pos);
    const auto eq = token.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      throw UsageError("descriptor: malformed token '" + std::string(token) + "'");
    }
    if (!fields.emplace(std::string(token.substr(0, eq)), std::string(token.substr(eq + 1))).second) {
      throw UsageError("descriptor: duplicate key '" + std::string(token.substr(0, eq)) + "'");
    }
    pos = end + 1;
  }

  auto take = [&](std::string_view key) -> std::string {
    auto it = fields.find(key);
    if (it == fields.end()) throw UsageError("descriptor: missing key '" + std::string(key) + "'");
    std::string v = it->second;
    fields.erase(it);
    return v;
  };

  ArchDescriptor d;
  d.kind = parse_model_kind(take("kind"));
  d.feature_maps = parse_uint("M", take("M"));
  d.pool_size = parse_uint("K", take("K"));
  d.num_classes = parse_uint("C", take("C"));
  d.resolution = parse_uint("R", take("R"));
  d.conv1_wide = parse_flag("wide", take("wide"));
  d.rconv_shortcut = parse_flag("shortcut", take("shortcut"));
  d.attention = parse_placement(take("att"));
  d.dilations.clear();
  const std::string dil = take("dil");
  std::string_view dv = dil;
  while (!dv.empty()) {
    const auto comma = std::min(dv.find(','), dv.size());
    d.dilations.push_back(parse_uint("dil", dv.substr(0, comma)));
    dv = comma < dv.size() ? dv.substr(comma + 1) : std::string_view{};
  }
  if (auto it = fields.find("states"); it != fields.end()) {
    d.rconv_states = parse_uint("states", it->second);
    fields.erase(it);
  }
  if (auto it = fields.find("bn"); it != fields.end()) {
    if (it->second != "state") throw UsageError("descriptor: bn must be 'state'");
    d.per_state_bn = true;
    fields.erase(it);
  }
  if (!fields.empty()) throw UsageError("descriptor: unknown key '" + fields.begin()->first + "'");
  d.validate();
  return d;
}

void ArchDescriptor::validate() const {
  if (feature_maps == 0 || pool_size == 0 || num_classes < 2 || resolution == 0) {
    throw UsageError("descriptor: M, K, R must be positive and C >= 2");
  }
  if (dilations.empty()) throw UsageError("descriptor: empty dilation list");
  for (auto d : dilations)
    if (d == 0) throw UsageError("descriptor: dilation must be >= 1");
  if (conv1_wide && feature_maps < dilations.size()) {
    throw UsageError("descriptor: wide expansion needs M >= number of streams");
  }
  using A = AttentionPlacement;
  if (rconv_layers() == 0 && attention != A::None && attention != A::AfterConv1) {
    throw UsageError("descriptor: attention placement needs a recurrent layer");
  }
  if (rconv_layers() == 0 && rconv_shortcut) throw UsageError("descriptor: shortcut needs a recurrent layer");
  if (attention == A::AfterRconvState1 && rconv_states < 1) throw UsageError("descriptor: no recurrent state 1");
  if (attention == A::AfterRconvState2 && rconv_states < 2) throw UsageError("descriptor: no recurrent state 2");
  if (kind != ModelKind::Custom) {
    const auto f = flags_of(kind);
    if (f.wide != conv1_wide || f.shortcut != rconv_shortcut || f.att != attention) {
      throw UsageError("descriptor: flags do not match named kind " + std::string(rcn::to_string(kind)));
    }
  }
}

ArchDescriptor named_descriptor(ModelKind kind, std::size_t feature_maps, std::size_t pool_size,
                                std::size_t num_classes, std::size_t resolution) {
  if (kind == ModelKind::Custom) throw UsageError("named_descriptor: custom is not a named model");
  ArchDescriptor d;
  d.kind = kind == ModelKind::Model2 ? ModelKind::Rcn : kind;
  d.feature_maps = feature_maps;
  d.pool_size = pool_size;
  d.num_classes = num_classes;
  d.resolution = resolution;
  const auto f = flags_of(d.kind);
  d.conv1_wide = f.wide;
  d.rconv_shortcut = f.shortcut;
  d.attention = f.att;
  d.validate();
  return d;
}

std::vector<std::size_t> wide_channel_split(std::size_t feature_maps, std::size_t streams) {
  if (streams == 0 || feature_maps < streams) {
    throw UsageError("wide expansion needs at least one channel per stream");
  }
  std::vector<std::size_t> split(streams, feature_maps / streams);
  for (std::size_t i = 0; i < feature_maps % streams; ++i) ++split[i];
  return split;
}

ArchDescriptor canonicalize(ArchDescriptor d) {
  if (d.kind != ModelKind::Custom) return d;
  for (auto kind : {ModelKind::Rcn, ModelKind::RcnW, ModelKind::RcnS, ModelKind::RcnA,
                    ModelKind::RcnC, ModelKind::RcnF, ModelKind::RcnP}) {
    const auto f = flags_of(kind);
    if (f.wide == d.conv1_wide && f.shortcut == d.rconv_shortcut && f.att == d.attention) {
      d.kind = kind;
      return d;
    }
  }
  return d;
}

}  // namespace rcn

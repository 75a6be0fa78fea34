#include "lvf/plan.hpp"

#include "lvf/error.hpp"

namespace lvf {

InjectionPlan InjectionPlan::make(Variant v, int64_t stride) {
  InjectionPlan p;
  p.variant = v;
  p.train_backbone = (v != Variant::FirstHalfFrozen);
  p.interval_stride = stride;
  p.validate();
  return p;
}

InjectionPlan InjectionPlan::from_name(const std::string& name) {
  if (name == "input") return make(Variant::InputConcat);
  if (name == "first-frozen") return make(Variant::FirstHalfFrozen);
  if (name == "first") return make(Variant::FirstHalf);
  if (name == "second") return make(Variant::SecondHalf);
  if (name == "interval") return make(Variant::Interval);
  throw ParamError("unknown injection variant: " + name);
}

const char* InjectionPlan::name() const {
  switch (variant) {
    case Variant::InputConcat: return "input";
    case Variant::FirstHalfFrozen: return "first-frozen";
    case Variant::FirstHalf: return "first";
    case Variant::SecondHalf: return "second";
    case Variant::Interval: return "interval";
  }
  return "?";
}

std::vector<int64_t> InjectionPlan::sites(int64_t num_blocks) const {
  std::vector<int64_t> s;
  switch (variant) {
    case Variant::InputConcat:
      break;
    case Variant::FirstHalfFrozen:
    case Variant::FirstHalf:
      for (int64_t b = 0; b < num_blocks / 2; ++b) s.push_back(b);
      break;
    case Variant::SecondHalf:
      for (int64_t b = num_blocks / 2; b < num_blocks; ++b) s.push_back(b);
      break;
    case Variant::Interval:
      for (int64_t b = 0; b < num_blocks; b += interval_stride) s.push_back(b);
      break;
  }
  return s;
}

void InjectionPlan::validate() const {
  if (interval_stride < 1) throw ConfigError("interval_stride must be >= 1");
  bool frozen = (variant == Variant::FirstHalfFrozen);
  if (frozen == train_backbone)
    throw ConfigError("train_backbone must be false exactly for the frozen variant");
}

FusionMode fusion_from_name(const std::string& name) {
  if (name == "concat") return FusionMode::Concat;
  if (name == "projection") return FusionMode::ProjectionAddition;
  throw ParamError("unknown fusion mode: " + name);
}

const char* fusion_name(FusionMode m) {
  return m == FusionMode::Concat ? "concat" : "projection";
}

PromptFormat prompt_format_from_name(const std::string& name) {
  if (name == "text") return PromptFormat::Text;
  if (name == "visual") return PromptFormat::Visual;
  if (name == "both") return PromptFormat::Both;
  throw ParamError("unknown prompt format: " + name);
}

const char* prompt_format_name(PromptFormat f) {
  switch (f) {
    case PromptFormat::Text: return "text";
    case PromptFormat::Visual: return "visual";
    case PromptFormat::Both: return "both";
  }
  return "?";
}

}  // namespace lvf

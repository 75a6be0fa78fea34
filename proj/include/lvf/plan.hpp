#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lvf {

// The five condition-integration layouts, in ablation-row order.
enum class Variant {
  InputConcat,      // (a) condition pixels concatenated at the patch embed
  FirstHalfFrozen,  // (b) features into blocks [0,B/2), backbone frozen
  FirstHalf,        // (c) features into blocks [0,B/2), co-trained
  SecondHalf,       // (d) features into blocks [B/2,B)
  Interval,         // (e) features into every stride-th block
};

struct InjectionPlan {
  Variant variant = Variant::FirstHalf;
  bool train_backbone = true;
  int64_t interval_stride = 2;

  static InjectionPlan make(Variant v, int64_t stride = 2);
  static InjectionPlan from_name(const std::string& name);
  const char* name() const;

  // Block indices that receive adapter features (empty for InputConcat).
  std::vector<int64_t> sites(int64_t num_blocks) const;
  void validate() const;
};

enum class FusionMode { Concat, ProjectionAddition };
enum class PromptFormat { Text, Visual, Both };

FusionMode fusion_from_name(const std::string& name);
const char* fusion_name(FusionMode m);
PromptFormat prompt_format_from_name(const std::string& name);
const char* prompt_format_name(PromptFormat f);

}  // namespace lvf

#pragma once

#include <optional>
#include <span>
#include <vector>

#include "introspect/pipeline/world.hpp"

namespace introspect::metrics {

/// The two parts of a patching or ablation explanation.
struct BranchParse {
    bool has_changed = false;
    int content = 0;
    friend bool operator==(const BranchParse&, const BranchParse&) = default;
};

/// "the most likely output would change to <<< X >>> ." or
/// "the output would remain unchanged from <<< X >>> .", followed by eos.
std::vector<int> render_branch(const pipeline::Vocab& vocab, bool has_changed, int content);
/// Branch prefix up to and including "<<<".
std::vector<int> branch_prefix(const pipeline::Vocab& vocab, bool has_changed);
std::optional<BranchParse> parse_branch(const pipeline::Vocab& vocab, std::span<const int> tokens);

}  // namespace introspect::metrics

#include "introspect/metrics/branch.hpp"

#include <algorithm>

namespace introspect::metrics {

std::vector<int> branch_prefix(const pipeline::Vocab& v, bool has_changed) {
    if (has_changed) return v.ids({"the", "most", "likely", "output", "would", "change", "to", "<<<"});
    return v.ids({"the", "output", "would", "remain", "unchanged", "from", "<<<"});
}

std::vector<int> render_branch(const pipeline::Vocab& v, bool has_changed, int content) {
    auto out = branch_prefix(v, has_changed);
    out.push_back(content);
    for (int t : v.ids({">>>", "."})) out.push_back(t);
    out.push_back(v.eos);
    return out;
}

std::optional<BranchParse> parse_branch(const pipeline::Vocab& v, std::span<const int> tokens) {
    for (bool changed : {true, false}) {
        const auto prefix = branch_prefix(v, changed);
        const std::size_t n = prefix.size();
        if (tokens.size() != n + 4) continue;
        if (!std::equal(prefix.begin(), prefix.end(), tokens.begin())) continue;
        if (tokens[n + 1] != v.id(">>>") || tokens[n + 2] != v.id(".") || tokens[n + 3] != v.eos) continue;
        const int content = tokens[n];
        if (content < 0 || content >= v.size()) return std::nullopt;
        return BranchParse{changed, content};
    }
    return std::nullopt;
}

}  // namespace introspect::metrics

#include "ssp/space/search_space.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>

namespace ssp::space {
namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

// Splits on '+' outside parentheses.
std::vector<std::string> split_terms(std::string_view text) {
    std::vector<std::string> terms;
    int depth = 0;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        if (text[i] == '(') ++depth;
        if (text[i] == ')') --depth;
        if (text[i] == '+' && depth == 0) {
            terms.push_back(trim(text.substr(start, i - start)));
            start = i + 1;
        }
    }
    terms.push_back(trim(text.substr(start)));
    return terms;
}

struct PresetInfo {
    Preset preset;
    std::string_view name;
    std::string_view long_name;
};

constexpr PresetInfo kPresets[] = {
    {Preset::P0Stretched, "p0", "p0_stretched"}, {Preset::P1Identity, "p1", "p1_identity"},
    {Preset::P2Gaussian, "p2", "p2_gaussian"},   {Preset::P3Dropout, "p3", "p3_dropout"},
    {Preset::P4TransConv, "p4", "p4_transconv"}, {Preset::P5Union, "p5", "p5_union"},
    {Preset::OneShot, "oneshot", "one_shot"},
};

}  // namespace

std::string_view preset_name(Preset preset) {
    for (const auto& info : kPresets)
        if (info.preset == preset) return info.name;
    return "unknown";
}

std::optional<Preset> parse_preset(std::string_view name) {
    const std::string key = lower(trim(name));
    for (const auto& info : kPresets)
        if (key == info.name || key == info.long_name) return info.preset;
    return std::nullopt;
}

std::vector<Preset> all_presets() {
    std::vector<Preset> out;
    for (const auto& info : kPresets) out.push_back(info.preset);
    return out;
}

std::vector<OperationSpec> preset_members(Preset preset, double dropout_p) {
    switch (preset) {
        case Preset::P0Stretched: return {OperationSpec::stretched_conv(3, 50, 50)};
        case Preset::P1Identity: return {OperationSpec::identity()};
        case Preset::P2Gaussian: return {OperationSpec::gaussian(10)};
        case Preset::P3Dropout: return {OperationSpec::dropout(dropout_p)};
        case Preset::P4TransConv: return {OperationSpec::trans_conv(3), OperationSpec::trans_conv(5)};
        case Preset::P5Union:
            return {OperationSpec::identity(),      OperationSpec::gaussian(10),  OperationSpec::gaussian(10),
                    OperationSpec::dropout(dropout_p), OperationSpec::trans_conv(3), OperationSpec::trans_conv(5)};
        case Preset::OneShot: return {OperationSpec::dropout(dropout_p), OperationSpec::stretched_conv(3, 50, 50)};
    }
    return {};
}

SearchSpace::SearchSpace() : SearchSpace(layers::base_operations(), {}) {}

SearchSpace::SearchSpace(std::vector<OperationSpec> base, std::vector<PoisonEntry> poisons)
    : base_(std::move(base)), poisons_(std::move(poisons)) {
    for (std::size_t i = 0; i < base_.size(); ++i) table_.push_back({SlotKind::Base, base_[i], i});
    for (std::size_t e = 0; e < poisons_.size(); ++e) {
        if (poisons_[e].q < 1) throw SpaceError("instance factor must be at least 1");
        for (std::size_t k = 0; k < poisons_[e].q; ++k) table_.push_back({SlotKind::Poison, poisons_[e].spec, e});
    }
    if (table_.empty()) throw SpaceError("search space has no actions");
}

const ActionSlot& SearchSpace::classify_action(std::size_t index) const {
    if (index >= table_.size()) {
        throw SpaceError("action index " + std::to_string(index) + " outside table of size " +
                         std::to_string(table_.size()));
    }
    return table_[index];
}

std::string SearchSpace::describe() const {
    std::string text;
    if (base_ == layers::base_operations()) {
        text = "base";
    } else {
        for (const auto& op : base_) text += (text.empty() ? "" : " + ") + std::string("1*") + op.canonical();
    }
    for (const auto& p : poisons_) text += " + " + std::to_string(p.q) + "*" + p.spec.canonical();
    return text;
}

nlohmann::json SearchSpace::to_json() const {
    nlohmann::json j;
    j["space"] = describe();
    j["size"] = table_.size();
    j["base_ops"] = nlohmann::json::array();
    for (const auto& op : base_) j["base_ops"].push_back(op.canonical());
    j["poison_entries"] = nlohmann::json::array();
    for (const auto& p : poisons_) j["poison_entries"].push_back({{"op", p.spec.canonical()}, {"q", p.q}});
    const Rational slot(1, static_cast<std::int64_t>(table_.size()));
    j["actions"] = nlohmann::json::array();
    for (std::size_t i = 0; i < table_.size(); ++i) {
        j["actions"].push_back({{"index", i},
                                {"kind", table_[i].kind == SlotKind::Base ? "base" : "poison"},
                                {"op", table_[i].spec.canonical()},
                                {"probability", std::to_string(slot.numerator()) + "/" +
                                                    std::to_string(slot.denominator())}});
    }
    return j;
}

SearchSpace compose(const SearchSpace& seed, std::span<const OperationSpec> members, std::size_t q) {
    if (q < 1) throw SpaceError("instance factor q must be at least 1, got " + std::to_string(q));
    std::vector<PoisonEntry> poisons = seed.poison_entries();
    for (const auto& spec : members) poisons.push_back({spec, q});
    return SearchSpace(seed.base_ops(), std::move(poisons));
}

SearchSpace compose(const SearchSpace& seed, Preset preset, std::size_t q) {
    const auto members = preset_members(preset);
    return compose(seed, members, q);
}

std::vector<SpecProbability> uniform_sampling_distribution(const SearchSpace& space) {
    std::vector<SpecProbability> out;
    for (const auto& slot : space.action_table()) {
        auto it = std::find_if(out.begin(), out.end(), [&](const SpecProbability& p) {
            return p.kind == slot.kind && p.spec == slot.spec;
        });
        if (it == out.end()) {
            out.push_back({slot.spec, slot.kind, 0, Rational(0)});
            it = out.end() - 1;
        }
        ++it->slots;
    }
    const auto total = static_cast<std::int64_t>(space.size());
    for (auto& p : out) p.probability = Rational(static_cast<std::int64_t>(p.slots), total);
    return out;
}

SearchSpace parse_space(std::string_view text, double preset_dropout_p) {
    const auto terms = split_terms(text);
    if (lower(terms.front()) != "base") {
        throw SpaceError("space text must start with 'base', got '" + terms.front() + "'", terms.front());
    }
    SearchSpace space;
    for (std::size_t t = 1; t < terms.size(); ++t) {
        const std::string& term = terms[t];
        if (term.empty()) throw SpaceError("empty term in space text '" + std::string(text) + "'", term);

        std::optional<std::size_t> count;
        std::string body = term;
        const auto star = term.find('*');
        if (star != std::string::npos && term.find('(') > star) {
            const std::string digits = trim(std::string_view(term).substr(0, star));
            std::size_t n = 0;
            const auto [end, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), n);
            if (ec != std::errc() || end != digits.data() + digits.size() || n < 1) {
                throw SpaceError("bad instance count '" + digits + "' in term '" + term + "'", term);
            }
            count = n;
            body = trim(std::string_view(term).substr(star + 1));
        }

        if (const auto preset = parse_preset(body)) {
            const auto members = preset_members(*preset, preset_dropout_p);
            const std::size_t slots = count.value_or(members.size());
            if (slots % members.size() != 0) {
                throw SpaceError("preset '" + body + "' has " + std::to_string(members.size()) +
                                     " members; slot count " + std::to_string(slots) + " does not divide evenly",
                                 term);
            }
            space = compose(space, members, slots / members.size());
            continue;
        }
        OperationSpec spec;
        try {
            spec = OperationSpec::parse(body);
        } catch (const layers::SpecError& e) {
            throw SpaceError(std::string("unknown term '") + body + "': " + e.what(), body);
        }
        const OperationSpec one[] = {spec};
        space = compose(space, one, count.value_or(1));
    }
    return space;
}

}  // namespace ssp::space

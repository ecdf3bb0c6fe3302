#pragma once

#include <boost/rational.hpp>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ssp/layers/operation_spec.hpp"

namespace ssp::space {

using layers::OperationSpec;
using Rational = boost::rational<std::int64_t>;

/// Invalid composition request or unparseable space text. `token()` holds the
/// offending piece of input when there is one.
class SpaceError : public std::invalid_argument {
public:
    SpaceError(const std::string& message, std::string token = {})
        : std::invalid_argument(message), token_(std::move(token)) {}
    const std::string& token() const { return token_; }

private:
    std::string token_;
};

enum class Preset { P0Stretched, P1Identity, P2Gaussian, P3Dropout, P4TransConv, P5Union, OneShot };

/// Short name used in space text: p0 … p5, oneshot.
std::string_view preset_name(Preset preset);
/// Accepts the short name or the long form (e.g. `p3_dropout`), any case.
std::optional<Preset> parse_preset(std::string_view name);
std::vector<Preset> all_presets();

/// Member specs in declaration order. P5 carries the Gaussian member twice,
/// so it has six entries. `dropout_p` is the rate of Dropout members.
std::vector<OperationSpec> preset_members(Preset preset, double dropout_p = 1.0);

struct PoisonEntry {
    OperationSpec spec;
    std::size_t q = 1;
};

enum class SlotKind { Base, Poison };

struct ActionSlot {
    SlotKind kind = SlotKind::Base;
    OperationSpec spec;
    /// Index into base_ops() or poison_entries(), depending on kind.
    std::size_t source = 0;
};

/// Base operations followed by poison instances. Every base op fills one
/// action slot and every poison entry fills q slots, in declaration order.
/// Immutable after construction.
class SearchSpace {
public:
    SearchSpace();  // the five base operations, no poison
    SearchSpace(std::vector<OperationSpec> base, std::vector<PoisonEntry> poisons);

    const std::vector<OperationSpec>& base_ops() const { return base_; }
    const std::vector<PoisonEntry>& poison_entries() const { return poisons_; }
    const std::vector<ActionSlot>& action_table() const { return table_; }
    std::size_t size() const { return table_.size(); }
    std::size_t poison_slots() const { return table_.size() - base_.size(); }
    bool poisoned() const { return !poisons_.empty(); }

    /// Throws SpaceError for an index outside the action table.
    const ActionSlot& classify_action(std::size_t index) const;

    /// Space text that parses back to an identical action table.
    std::string describe() const;

    nlohmann::json to_json() const;

    bool operator==(const SearchSpace& other) const { return describe() == other.describe(); }

private:
    std::vector<OperationSpec> base_;
    std::vector<PoisonEntry> poisons_;
    std::vector<ActionSlot> table_;
};

/// Adds q instances of each member to `seed`. q must be at least 1.
SearchSpace compose(const SearchSpace& seed, std::span<const OperationSpec> members, std::size_t q);
SearchSpace compose(const SearchSpace& seed, Preset preset, std::size_t q);

/// Probability that a uniform policy over action slots picks `spec`, summed
/// over all slots holding it. Entries follow first appearance in the table.
struct SpecProbability {
    OperationSpec spec;
    SlotKind kind = SlotKind::Base;
    std::size_t slots = 0;
    Rational probability;
};

std::vector<SpecProbability> uniform_sampling_distribution(const SearchSpace& space);

/// Parses `base [+ N*preset | + N*op(args)]*`. For an operation literal N is
/// its instance factor (default 1). For a preset N is the total number of
/// poison slots and must be a multiple of the preset size; a bare preset
/// name means one instance of each member. Dropout members of presets use
/// `preset_dropout_p`; literal dropout terms carry their own rate.
SearchSpace parse_space(std::string_view text, double preset_dropout_p = 1.0);

}  // namespace ssp::space

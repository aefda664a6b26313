// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace hidrop {

enum class Modality { System, Visual, Textual };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::System: return "System";
        case Modality::Visual: return "Visual";
        case Modality::Textual: return "Textual";
    }
    return "?";
}

inline Modality modality_from_name(const std::string& s) {
    if (s == "System") return Modality::System;
    if (s == "Visual") return Modality::Visual;
    if (s == "Textual") return Modality::Textual;
    throw std::invalid_argument("unknown modality '" + s + "'");
}

struct TokenInfo {
    std::size_t index = 0;       // global position in the sequence
    Modality modality = Modality::Textual;
    std::int64_t position_id = 0;
    std::size_t segment = 0;     // conversation turn for text tokens
};

// Position-id policy under dynamic token sets.
//   Persistent: ids assigned once at input, never touched.
//   Compacted:  survivors reindexed consecutively after every prune, with
//               the following text ids shifted down (PDrop-style).
//   Group:      text and vision ids drawn from disjoint ranges; no updates.
enum class PeVariant { Persistent, Compacted, Group };

inline const char* pe_name(PeVariant v) {
    switch (v) {
        case PeVariant::Persistent: return "persistent";
        case PeVariant::Compacted: return "compacted";
        case PeVariant::Group: return "group";
    }
    return "?";
}

struct PeMode {
    PeVariant variant = PeVariant::Persistent;
    std::int64_t group_offset = 4096;
};

// Ordered token stream [system : vision : text] with per-token modality,
// position id, and per-layer liveness (filled in by the forward pass).
struct SequenceLayout {
    std::vector<TokenInfo> tokens;
    std::vector<std::vector<std::uint8_t>> live_at;  // [layer-1][token]
    std::size_t n_system = 0;
    std::size_t n_vision = 0;
    std::size_t n_text = 0;
    std::int64_t vision_origin_id = 0;  // first vision position id at input

    std::size_t size() const { return tokens.size(); }
    std::size_t vision_begin() const { return n_system; }
    std::size_t vision_end() const { return n_system + n_vision; }
    std::size_t text_begin() const { return n_system + n_vision; }

    bool is_vision(std::size_t t) const { return tokens[t].modality == Modality::Visual; }

    static SequenceLayout make(std::size_t n_system, std::size_t n_vision, std::size_t n_text,
                               const PeMode& pe = {}, std::size_t text_segments = 1) {
        if (n_text == 0)
            throw std::invalid_argument("SequenceLayout: need at least one text token");
        if (text_segments == 0 || text_segments > n_text)
            throw std::invalid_argument("SequenceLayout: bad text segment count");
        SequenceLayout lay;
        lay.n_system = n_system;
        lay.n_vision = n_vision;
        lay.n_text = n_text;
        const std::size_t n = n_system + n_vision + n_text;
        lay.tokens.resize(n);
        std::int64_t next_text_id = 0;
        for (std::size_t t = 0; t < n; ++t) {
            TokenInfo& tok = lay.tokens[t];
            tok.index = t;
            if (t < n_system) {
                tok.modality = Modality::System;
                tok.position_id = next_text_id++;
            } else if (t < n_system + n_vision) {
                tok.modality = Modality::Visual;
                if (pe.variant == PeVariant::Group)
                    tok.position_id = pe.group_offset + static_cast<std::int64_t>(t - n_system);
                else
                    tok.position_id = next_text_id++;
            } else {
                tok.modality = Modality::Textual;
                tok.position_id = next_text_id++;
                const std::size_t i = t - n_system - n_vision;
                tok.segment = i * text_segments / n_text;
            }
        }
        lay.vision_origin_id =
            n_vision > 0 ? lay.tokens[n_system].position_id : static_cast<std::int64_t>(n_system);
        return lay;
    }
};

// Re-derives position ids after a prune event. survivors holds the global
// indices of the vision tokens still alive, in ascending order.
inline void apply_pe(SequenceLayout& layout, const PeMode& pe,
                     std::span<const std::size_t> survivors) {
    for (std::size_t s : survivors)
        if (s >= layout.size() || !layout.is_vision(s))
            throw std::invalid_argument("apply_pe: survivor is not a vision token");
    switch (pe.variant) {
        case PeVariant::Persistent:
        case PeVariant::Group:
            return;  // ids never move
        case PeVariant::Compacted: {
            std::int64_t next = layout.vision_origin_id;
            for (std::size_t s : survivors) layout.tokens[s].position_id = next++;
            for (std::size_t t = layout.text_begin(); t < layout.size(); ++t)
                layout.tokens[t].position_id = next++;
            // duplicate ids among live tokens would be a bug in this rule
            std::unordered_set<std::int64_t> seen;
            for (std::size_t s : survivors)
                if (!seen.insert(layout.tokens[s].position_id).second)
                    throw std::logic_error("apply_pe: compacted reindexing produced duplicate ids");
            for (std::size_t t = 0; t < layout.text_begin(); ++t)
                if (layout.tokens[t].modality != Modality::Visual)
                    if (!seen.insert(layout.tokens[t].position_id).second)
                        throw std::logic_error("apply_pe: compacted reindexing produced duplicate ids");
            return;
        }
    }
}

}  // namespace hidrop

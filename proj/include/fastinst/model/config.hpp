#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fastinst {

enum class DecoderOrder { PixelThenQuery, QueryThenPixel };
enum class PosKind { Learnable, Sine };
/// Pyramid level the IA-guided queries are drawn from.
enum class SourceLevel { E3, E4, E5 };

inline std::size_t level_stride(SourceLevel level) {
    switch (level) {
        case SourceLevel::E3: return 8;
        case SourceLevel::E4: return 16;
        case SourceLevel::E5: return 32;
    }
    return 16;
}

struct ModelConfig {
    int num_classes = 3;
    std::size_t dim = 32;
    bool use_ppm = true;
    std::size_t na = 16;
    std::size_t nb = 8;
    PosKind pos = PosKind::Learnable;
    SourceLevel source_level = SourceLevel::E4;
    bool local_max_first = true;
    std::size_t layers = 1;  // D
    std::size_t heads = 4;
    std::size_t ffn_dim = 0;  // 0 selects 4 * dim
    DecoderOrder order = DecoderOrder::PixelThenQuery;
    std::uint64_t seed = 0;

    /// Full-width profile: 256 channels, 100 IA-guided and 8 auxiliary queries, three decoder layers.
    static ModelConfig full_scale() {
        ModelConfig cfg;
        cfg.dim = 256;
        cfg.na = 100;
        cfg.nb = 8;
        cfg.layers = 3;
        cfg.heads = 8;
        return cfg;
    }

    std::size_t ffn_width() const { return ffn_dim ? ffn_dim : 4 * dim; }
    /// Side of the learnable positional table: round(sqrt(Na)), at least 1.
    std::size_t pos_table_side() const {
        return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(na)))));
    }

    void validate() const {
        if (num_classes < 1) throw std::invalid_argument("model: num_classes must be positive");
        if (dim == 0 || heads == 0 || dim % heads) throw std::invalid_argument("model: dim must be a positive multiple of heads");
        if (na == 0) throw std::invalid_argument("model: query.na must be positive");
        if (pos == PosKind::Sine && dim % 4) throw std::invalid_argument("model: sine positions need dim divisible by 4");
    }
};

/// Records discrete routing decisions (query selection, attention masks,
/// matchings) on one pass and replays them on later passes.
class RoutingTape {
   public:
    enum class Mode { Record, Replay };

    Mode mode() const { return mode_; }
    void replay() {
        mode_ = Mode::Replay;
        cursor_ = 0;
    }
    std::size_t size() const { return entries_.size(); }

    template <typename Compute>
    std::vector<std::size_t> route(Compute&& compute) {
        if (mode_ == Mode::Replay) {
            if (cursor_ >= entries_.size()) throw std::logic_error("routing tape exhausted on replay");
            return entries_[cursor_++];
        }
        entries_.push_back(compute());
        return entries_.back();
    }

   private:
    Mode mode_ = Mode::Record;
    std::size_t cursor_ = 0;
    std::vector<std::vector<std::size_t>> entries_;
};

/// Runs `compute` directly, or through `tape` when one is supplied.
template <typename Compute>
std::vector<std::size_t> routed(RoutingTape* tape, Compute&& compute) {
    return tape ? tape->route(std::forward<Compute>(compute)) : compute();
}

}  // namespace fastinst

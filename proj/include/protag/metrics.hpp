#pragma once

#include <cmath>
#include <string>

#include "protag/experts.hpp"
#include "protag/tensor.hpp"

namespace protag {

// Desk-scale analogs of the usual prompt/subject fidelity scores, computed
// with the toy embedders. Cosines are scale-invariant because embeddings are
// unit-norm by construction.

/// Mean over frames of cos(prior(prompt), embed(frame)). The prompt is mapped
/// into visual space through the prior converter so both sides share a space.
inline double prompt_fidelity(const VideoTensor& video, const std::string& prompt,
                              const ExpertRegistry& experts) {
    experts.validate();
    const Embedding target = experts.prior_converter->convert(prompt);
    double acc = 0.0;
    for (int f = 0; f < video.frames; ++f)
        acc += cosine(target, experts.vision_embedder->embed(frame_of(video, f), nullptr));
    return acc / video.frames;
}

/// Mean over frames of cos(reference, embed(frame, mask)). Frames with an
/// empty mask are skipped; the whole-frame variant ignores masks entirely
/// (parity with full-frame embedding metrics, which reward background
/// copying).
inline double subject_fidelity(const VideoTensor& video, const Embedding& reference,
                               const MaskVolume& masks, const ExpertRegistry& experts,
                               bool whole_frame = false) {
    experts.validate();
    require(reference.space == EmbeddingSpace::visual, "subject_fidelity: visual reference expected");
    require(masks.frames == video.frames && masks.height == video.height && masks.width == video.width,
            "subject_fidelity: mask/video shape mismatch");
    double acc = 0.0;
    int counted = 0;
    for (int f = 0; f < video.frames; ++f) {
        const Image frame = frame_of(video, f);
        if (whole_frame) {
            acc += cosine(reference, experts.vision_embedder->embed(frame, nullptr));
            ++counted;
            continue;
        }
        const Mask2D m = masks.frame(f);
        if (m.empty_mask()) continue;
        acc += cosine(reference, experts.vision_embedder->embed(frame, &m));
        ++counted;
    }
    require(counted > 0, "subject_fidelity: all per-frame masks are empty");
    return acc / counted;
}

/// Root-mean-square pixel error over the complement region (1 - sum of
/// masks), per frame then averaged.
inline double background_preservation(const VideoTensor& edited, const VideoTensor& source,
                                      const std::vector<MaskVolume>& masks) {
    require_same_shape(edited, source, "background_preservation");
    require(!masks.empty(), "background_preservation: masks required");
    double total = 0.0;
    for (int f = 0; f < edited.frames; ++f) {
        double se = 0.0, wsum = 0.0;
        for (int y = 0; y < edited.height; ++y)
            for (int x = 0; x < edited.width; ++x) {
                float covered = 0;
                for (const auto& m : masks) covered += m.at(f, y, x);
                const double w = std::max(0.0f, 1.0f - covered);
                if (w <= 0.0) continue;
                double ce = 0.0;
                for (int c = 0; c < edited.channels; ++c) {
                    const double d = static_cast<double>(edited.at(f, c, y, x)) - source.at(f, c, y, x);
                    ce += d * d;
                }
                se += w * ce / edited.channels;
                wsum += w;
            }
        require(wsum > 0.0, "background_preservation: complement region is empty at frame " +
                                std::to_string(f));
        total += std::sqrt(se / wsum);
    }
    return total / edited.frames;
}

} // namespace protag

#ifndef SWIPE_LOSS_HPP
#define SWIPE_LOSS_HPP

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include <nlohmann/json.hpp>

#include "common.hpp"

// Point-occupancy objectives on row-batched (points x classes) matrices.
// Each function returns the loss value and, when `grad` is non-null, adds
// scale * dL/d(probabilities) into it.

namespace swipe::loss {

inline constexpr double kProbabilityFloor = 1e-12;

struct LossConfig {
    double alpha = 0.5;   // patch vs image decoder balance
    double beta = 0.1;    // SPO weight
    double lambda = 1e-4; // embedding L2 weight

    void validate() const
    {
        if (!(alpha >= 0.0 && alpha <= 1.0)) {
            throw ConfigError("loss alpha must lie in [0, 1]");
        }
        if (beta < 0.0 || lambda < 0.0) {
            throw ConfigError("loss beta and lambda must be >= 0");
        }
    }
};

inline void to_json(nlohmann::json& j, const LossConfig& c)
{
    j = nlohmann::json{{"alpha", c.alpha}, {"beta", c.beta}, {"lambda", c.lambda}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c)
{
    j.at("alpha").get_to(c.alpha);
    j.at("beta").get_to(c.beta);
    j.at("lambda").get_to(c.lambda);
}

template <typename T>
Mat<T> one_hot(const std::vector<int>& labels, int num_classes)
{
    Mat<T> o = Mat<T>::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        o(static_cast<Eigen::Index>(i), labels[i]) = T(1);
    }
    return o;
}

/// Mean over points of -log(max(p_target, 1e-12)).
template <typename T>
T ce_loss(const Mat<T>& targets, const Mat<T>& probs, Mat<T>* grad = nullptr, T scale = T(1))
{
    const Eigen::Index n = probs.rows();
    if (n == 0) {
        return T(0);
    }
    T total = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index c = 0;
        targets.row(i).maxCoeff(&c);
        const T p = probs(i, c);
        const T floor = static_cast<T>(kProbabilityFloor);
        total -= std::log(std::max(p, floor));
        if (grad && p > floor) {
            (*grad)(i, c) -= scale / (static_cast<T>(n) * p);
        }
    }
    return total / static_cast<T>(n);
}

/// Smoothed Dice over the point batch:
///   1 - (1/C) sum_c (2 sum_i o_ic p_ic + 1) / (sum_i o_ic^2 + sum_i p_ic^2 + 1)
template <typename T>
T dice_loss(const Mat<T>& targets, const Mat<T>& probs, Mat<T>* grad = nullptr, T scale = T(1))
{
    const Eigen::Index classes = probs.cols();
    T mean_dice = 0;
    for (Eigen::Index c = 0; c < classes; ++c) {
        const T inter = targets.col(c).dot(probs.col(c));
        const T num = T(2) * inter + T(1);
        const T den = targets.col(c).squaredNorm() + probs.col(c).squaredNorm() + T(1);
        mean_dice += num / den;
        if (grad) {
            // d(1 - D_c / C)/dp_ic = -(2 o_ic den - 2 p_ic num) / (C den^2)
            const T k = scale / (static_cast<T>(classes) * den * den);
            grad->col(c) += (-k) * (T(2) * den * targets.col(c) - T(2) * num * probs.col(c));
        }
    }
    return T(1) - mean_dice / static_cast<T>(classes);
}

/// 0.5 * CE + 0.5 * Dice.
template <typename T>
T occ_loss(const Mat<T>& targets, const Mat<T>& probs, Mat<T>* grad = nullptr, T scale = T(1))
{
    const T half = T(0.5);
    return half * ce_loss(targets, probs, grad, half * scale) + half * dice_loss(targets, probs, grad, half * scale);
}

/// alpha * L_occ(patch) + (1 - alpha) * L_occ(image), given component values.
inline double patch_image_loss(double patch_occ, double image_occ, double alpha)
{
    return alpha * patch_occ + (1.0 - alpha) * image_occ;
}

struct LossBreakdown {
    double total = 0;
    double patch_occ = 0; // L_occ on D^P predictions
    double image_occ = 0; // L_occ on D^I predictions
    double patch_image = 0;
    double spo = 0;
    double reg = 0; // mean ||z^P||^2 over touched cells + ||z^I||^2 (unscaled by lambda)

    LossBreakdown& operator+=(const LossBreakdown& o)
    {
        total += o.total;
        patch_occ += o.patch_occ;
        image_occ += o.image_occ;
        patch_image += o.patch_image;
        spo += o.spo;
        reg += o.reg;
        return *this;
    }
    LossBreakdown& operator/=(double k)
    {
        total /= k;
        patch_occ /= k;
        image_occ /= k;
        patch_image /= k;
        spo /= k;
        reg /= k;
        return *this;
    }
};

/// L = L_PI + beta * L_SPO + lambda * reg from component values.
inline double combine(double patch_image, double spo, double reg, const LossConfig& cfg)
{
    return patch_image + cfg.beta * spo + cfg.lambda * reg;
}

/// Gradient sinks for total_loss; any pointer may be null.
template <typename T>
struct LossGradients {
    Mat<T>* patch_probs = nullptr;
    Mat<T>* image_probs = nullptr;
    Mat<T>* spo_probs = nullptr;
    Mat<T>* patch_embeddings = nullptr; // full Z^P gradient (cells x d)
    Vec<T>* image_embedding = nullptr;
};

/// Full objective for one image's point batch.
///
/// touched_cells lists the Z^P rows indexed by the batch (duplicates ignored);
/// the patch term of the regularizer averages over them.
template <typename T>
LossBreakdown total_loss(const Mat<T>& targets, const Mat<T>& patch_probs, const Mat<T>& image_probs,
                         const Mat<T>& spo_targets, const Mat<T>& spo_probs, const Mat<T>& patch_embeddings,
                         const std::vector<int>& touched_cells, const Vec<T>& image_embedding, const LossConfig& cfg,
                         LossGradients<T> grads = {}, T scale = T(1))
{
    cfg.validate();
    LossBreakdown b;
    const T a = static_cast<T>(cfg.alpha);
    b.patch_occ = occ_loss(targets, patch_probs, grads.patch_probs, scale * a);
    b.image_occ = occ_loss(targets, image_probs, grads.image_probs, scale * (T(1) - a));
    b.patch_image = patch_image_loss(b.patch_occ, b.image_occ, cfg.alpha);
    if (spo_probs.rows() > 0) {
        b.spo = occ_loss(spo_targets, spo_probs, grads.spo_probs, scale * static_cast<T>(cfg.beta));
    }
    const std::set<int> unique(touched_cells.begin(), touched_cells.end());
    double patch_sq = 0;
    for (int cell : unique) {
        patch_sq += static_cast<double>(patch_embeddings.row(cell).squaredNorm());
    }
    if (!unique.empty()) {
        patch_sq /= static_cast<double>(unique.size());
    }
    b.reg = patch_sq + static_cast<double>(image_embedding.squaredNorm());
    const T lam = scale * static_cast<T>(cfg.lambda);
    if (grads.patch_embeddings && !unique.empty()) {
        const T k = T(2) * lam / static_cast<T>(unique.size());
        for (int cell : unique) {
            grads.patch_embeddings->row(cell) += k * patch_embeddings.row(cell);
        }
    }
    if (grads.image_embedding) {
        *grads.image_embedding += T(2) * lam * image_embedding;
    }
    b.total = combine(b.patch_image, b.spo, b.reg, cfg);
    return b;
}

} // namespace swipe::loss

#endif

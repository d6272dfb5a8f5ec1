#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "truecam/matrix.hpp"
#include "truecam/rng.hpp"

namespace truecam {

/// Architecture of the spectral-normalized MLP body.
/// layer_dims runs input dim -> hidden dims; every layer is dense + ReLU.
struct SnMlpConfig {
    std::vector<std::size_t> layer_dims;
    double sn_cap = 0.95;        // spectral-norm cap c
    std::size_t power_iters = 10;
};

struct DenseLayer {
    Matrix w;                // out x in
    std::vector<double> b;   // out
};

struct SnMlp {
    SnMlpConfig cfg;
    std::vector<DenseLayer> layers;

    /// Penultimate representation h(x); ReLU after every layer.
    std::vector<double> forward(std::span<const double> x) const;
};

/// Rescales W to cW/lambda when its estimated spectral norm lambda exceeds
/// the cap c; otherwise W is returned unchanged.
Matrix apply_spectral_normalization(const Matrix& w, double c,
                                    std::size_t power_iters, Rng& rng);

/// Random-feature projection, frozen after construction.
struct RffProjection {
    Matrix w;               // rff_dim x input_dim, standard normal entries
    std::vector<double> b;  // rff_dim, uniform [0, 2*pi)
};

RffProjection make_rff_projection(std::size_t rff_dim, std::size_t input_dim,
                                  Rng& rng);

/// phi_i = sqrt(2/D) * cos(-(W h)_i + b_i); squared norm has expectation 1,
/// and phi(h1).phi(h2) approximates exp(-|h1-h2|^2 / 2).
std::vector<double> rff_transform(std::span<const double> h,
                                  const RffProjection& proj);

/// Ridge posterior over the random features, shared across classes:
/// covariance tau * (Phi^T Phi + tau I)^{-1}.
struct GpPosterior {
    Matrix beta;        // rff_dim x num_classes
    Matrix precision;   // rff_dim x rff_dim, equals Phi^T Phi + tau I
    Matrix chol;        // cached lower Cholesky factor of precision
    double tau = 1.0;
    std::size_t num_classes = 0;
};

struct SngpHead {
    SnMlp mlp;
    RffProjection rff;
    GpPosterior posterior;

    bool trained() const { return !posterior.chol.empty(); }
};

struct TrainConfig {
    std::size_t epochs = 4;
    std::size_t batch_size = 64;
    double lr = 3e-4;
    double lr_decay = 0.98;          // multiplied in every lr_decay_every steps
    std::size_t lr_decay_every = 512;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double tau = 1.0;
    std::uint64_t seed = 0;
};

struct FitResult {
    SngpHead head;
    std::vector<double> epoch_losses;  // mean batch cross-entropy per epoch
    double train_accuracy = 0.0;
};

/// Trains MLP weights and output weights beta end to end with minibatch
/// Adam on softmax cross-entropy; spectral normalization is re-applied to
/// every hidden weight matrix after each optimizer step. The posterior
/// precision Phi^T Phi + tau I is assembled in one pass over the training
/// set after the last epoch. Throws when the loss turns non-finite.
FitResult fit_head(const Matrix& x, const std::vector<int>& labels,
                   std::size_t num_classes, const SnMlpConfig& mlp_cfg,
                   std::size_t rff_dim, const TrainConfig& cfg);

enum class PredictiveIntegral {
    MeanField,    // softmax(mu / sqrt(1 + (pi/8) sigma^2))
    MonteCarlo,   // seeded sampling of logits; the slow cross-check
};

struct PredictiveOutput {
    std::vector<double> mu;
    std::vector<double> sigma;   // equal entries here: the posterior is shared
    std::vector<double> probs;   // sums to 1
    double uncertainty = 0.0;    // sqrt(tau * phi^T precision^{-1} phi)
};

PredictiveOutput predict(std::span<const double> x, const SngpHead& head,
                         PredictiveIntegral integral = PredictiveIntegral::MeanField,
                         std::size_t mc_samples = 1000, std::uint64_t mc_seed = 0);

/// Row-per-input conveniences over predict().
Matrix predict_probs(const Matrix& x, const SngpHead& head);
std::vector<double> predict_uncertainty(const Matrix& x, const SngpHead& head);

/// Versioned binary checkpoint; little-endian, byte-identical round-trip.
/// Only trained heads can be saved.
void save_checkpoint(const std::string& path, const SngpHead& head);
SngpHead load_checkpoint(const std::string& path);

/// Baseline two-hidden-layer classifier whose dropout stays active at
/// prediction time.
struct DropoutHead {
    Matrix w1;
    std::vector<double> b1;
    Matrix w2;
    std::vector<double> b2;
    Matrix w_out;
    std::vector<double> b_out;
    double rate = 0.1;
};

DropoutHead make_dropout_head(std::size_t input_dim, std::size_t hidden_dim,
                              std::size_t num_classes, double rate, Rng& rng);

/// Runs `passes` stochastic forward passes and returns (mean probs, per-class
/// std across passes). Mask protocol, fixed so streams are reproducible: per
/// pass, one uniform draw per hidden unit in layer order; a unit is kept when
/// the draw is >= rate and scaled by 1/(1-rate). Draws happen even at rate 0.
std::pair<std::vector<double>, std::vector<double>> mc_dropout_predict(
    std::span<const double> x, const DropoutHead& head, std::size_t passes,
    Rng& rng);

/// Attention pooling of tile embeddings into one slide representation.
struct AbmilConfig {
    std::size_t embed_dim = 512;
    std::size_t attn_dim = 384;
    double input_dropout = 0.1;    // training-time rates, inert at pooling
    double hidden_dropout = 0.25;
};

struct AbmilNet {
    AbmilConfig cfg;
    Matrix w_embed;              // embed_dim x input_dim
    std::vector<double> b_embed;
    Matrix v_attn;               // attn_dim x embed_dim
    std::vector<double> w_attn;  // attn_dim
};

AbmilNet make_abmil(std::size_t input_dim, const AbmilConfig& cfg, Rng& rng);

struct AbmilPooled {
    std::vector<double> representation;  // attention-weighted sum of embeddings
    std::vector<double> attention;       // nonnegative, sums to 1
};

/// e_i = ReLU(W t_i + b); a = softmax_i(w^T tanh(V e_i)); repr = sum a_i e_i.
AbmilPooled abmil_pool(const Matrix& tiles, const AbmilNet& net);

namespace detail {

/// Training-loss internals exposed for finite-difference checks in tests.
double batch_cross_entropy(const SnMlp& mlp, const RffProjection& proj,
                           const Matrix& beta, const Matrix& x,
                           const std::vector<int>& labels);
Matrix beta_gradient(const SnMlp& mlp, const RffProjection& proj,
                     const Matrix& beta, const Matrix& x,
                     const std::vector<int>& labels);

}  // namespace detail

}  // namespace truecam

#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "condhar/archspec.hpp"
#include "condhar/data.hpp"
#include "condhar/trainer.hpp"

namespace condhar {

// ---- cost accounting -------------------------------------------------------

inline constexpr const char* kFlopsConvention =
    "flops = 2 x multiply-adds (conv, dense, expert combination, routing); "
    "elementwise_flops = 1 per output element of bias, batch-norm, activation, pooling, "
    "softmax and routing sigmoid; dropout is free at inference; per example";

struct LayerCost {
    std::string name;
    LayerKind kind = LayerKind::relu;
    std::size_t multiply_adds = 0;
    std::size_t flops = 0;  // 2 x multiply_adds
    std::size_t elementwise_flops = 0;
    std::size_t params = 0;
};

struct FlopsReport {
    std::vector<LayerCost> per_layer;
    std::size_t multiply_adds = 0;
    std::size_t flops = 0;
    std::size_t elementwise_flops = 0;
    std::size_t params = 0;
    std::size_t n_experts = 1;
    std::string counting_convention = kFlopsConvention;

    std::size_t total_flops() const { return flops + elementwise_flops; }
    std::string table() const;
};

LayerCost layer_cost(const LayerInfo& layer);

// Static per-example cost of the model's layer stack.
FlopsReport count_flops(const Model& model);
// Builds the model for `input_shape` first; throws like build_model.
FlopsReport count_flops(const ModelSpec& spec, std::pair<std::size_t, std::size_t> input_shape,
                        std::size_t n_classes);

// Learnable parameters by formula (BN running statistics excluded).
std::size_t count_params(const Model& model);

struct FlopsSweepRow {
    std::size_t n_experts = 1;
    std::size_t flops = 0;
    std::size_t params = 0;
    double ratio = 1.0;  // flops / flops at the first row
};

std::vector<FlopsSweepRow> flops_sweep(const ModelSpec& spec,
                                       std::pair<std::size_t, std::size_t> input_shape,
                                       std::size_t n_classes,
                                       const std::vector<std::size_t>& experts);
std::string render_sweep_csv(const std::vector<FlopsSweepRow>& rows);

// ---- confusion -------------------------------------------------------------

struct Misclassification {
    std::size_t truth = 0;
    std::size_t predicted = 0;
    std::size_t count = 0;
};

struct ConfusionReport {
    Evaluation evaluation;
    std::vector<Misclassification> ranked;  // off-diagonal cells, most frequent first
    std::string table;                       // aligned text
    std::string csv;                         // true\predicted matrix
};

ConfusionReport confusion_report(const Evaluation& ev, const std::vector<std::string>& class_names);
ConfusionReport confusion_matrix_report(Model& model, const WindowedDataset& ds,
                                        const std::vector<std::string>& class_names = {});

// ---- routing ---------------------------------------------------------------

struct LayerRouting {
    std::size_t layer_index = 0;  // position in Model::layers()
    std::string name;
    std::size_t n_experts = 0;
    std::vector<double> alphas;                 // [examples x n_experts]
    std::vector<std::vector<double>> mean;      // [class][expert]
    std::vector<std::vector<double>> stddev;    // [class][expert], population
};

struct RoutingStats {
    std::size_t n_classes = 0;
    std::vector<int> labels;  // per example
    std::vector<std::size_t> class_counts;
    std::vector<LayerRouting> layers;
    std::vector<double> bucket_edges;   // buckets + 1 edges over [0, 1]
    std::vector<std::size_t> histogram; // over every recorded weight
    std::size_t out_of_range = 0;       // weights outside [0, 1] (non-sigmoid routing)
    // Share of weights within 0.1 of either end, and Sarle's bimodality
    // coefficient (> 5/9 suggests more than one mode).
    double edge_mass = 0.0;
    double bimodality_coefficient = 0.0;

    std::size_t sample_count() const;
};

// Captures the routing weights of the selected conditional layers (all when
// `layer_selection` is empty) for every example, in eval mode.
RoutingStats routing_stats(Model& model, const WindowedDataset& ds,
                           const std::vector<std::size_t>& layer_selection = {},
                           std::size_t buckets = 20, std::size_t batch_size = 256);

std::string routing_means_csv(const RoutingStats& s);      // layer,class,expert,mean,std,count
std::string routing_histogram_csv(const RoutingStats& s);  // bucket_left,bucket_right,count
std::string routing_samples_csv(const RoutingStats& s);    // layer,example,label,alpha_0..

// Mean pairwise Euclidean distance between class-mean routing vectors of one
// layer. Classes with no examples are skipped; needs two populated classes.
double class_divergence(const std::vector<std::vector<double>>& class_means,
                        const std::vector<std::size_t>& class_counts);

struct DivergenceReport {
    std::vector<std::string> layers;
    std::vector<double> scores;
    bool increasing = false;  // strictly, across depth
};

DivergenceReport depth_divergence(const RoutingStats& stats);

}  // namespace condhar

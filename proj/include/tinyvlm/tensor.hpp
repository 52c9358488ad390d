// Dense double-precision tensors with reverse-mode autodiff on a
// define-by-run tape, plus SGD/Adam and a binary checkpoint format.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace tinyvlm {

struct DimensionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InvalidRequestError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct InternalStateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty unless requires_grad
    bool requires_grad = false;

    Tensor() = default;
    Tensor(std::vector<int> s, bool req_grad);

    std::size_t size() const { return data.size(); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    void ensure_grad();
    void zero_grad();
    bool all_finite() const;
    std::string shape_str() const;
};

TensorPtr make_tensor(std::vector<int> shape, bool requires_grad = false);
TensorPtr make_tensor(std::vector<int> shape, std::vector<double> values,
                      bool requires_grad = false);

// Deterministic RNG used everywhere a seed appears (xorshift128+ seeded via
// splitmix64). Float and normal draws are constructed explicitly so streams
// never depend on standard-library distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed);
    std::uint64_t next_u64();
    // uniform in [0, 1)
    double uniform();
    // uniform integer in [0, n)
    std::uint64_t below(std::uint64_t n);
    double normal();

private:
    std::uint64_t state_[2];
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Records backward closures as ops execute; backward() replays in reverse.
// One tape per forward pass; a tape must not be shared across threads.
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    void backward(const TensorPtr& loss);
    std::size_t node_count() const { return nodes_.size(); }

private:
    std::vector<std::function<void()>> nodes_;
};

// --- differentiable ops -------------------------------------------------

TensorPtr matmul(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr transpose(Tape& tape, const TensorPtr& a);
TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(Tape& tape, const TensorPtr& a, double c);
// bias broadcast over the last axis; the only broadcasting in the library
TensorPtr bias_add(Tape& tape, const TensorPtr& x, const TensorPtr& bias);
TensorPtr softmax_rows(Tape& tape, const TensorPtr& x);
TensorPtr layer_norm(Tape& tape, const TensorPtr& x, const TensorPtr& gain,
                     const TensorPtr& bias, double eps);
TensorPtr silu(Tape& tape, const TensorPtr& x);
TensorPtr embedding_rows(Tape& tape, const TensorPtr& table,
                         const std::vector<int>& ids);
TensorPtr slice_cols(Tape& tape, const TensorPtr& x, int start, int n);
TensorPtr concat_cols(Tape& tape, const std::vector<TensorPtr>& parts);
TensorPtr slice_rows(Tape& tape, const TensorPtr& x, int start, int n);
TensorPtr concat_rows(Tape& tape, const std::vector<TensorPtr>& parts);
// row-major relabeling; element count must be unchanged
TensorPtr reshape(Tape& tape, const TensorPtr& x, std::vector<int> shape);
TensorPtr masked_cross_entropy(Tape& tape, const TensorPtr& logits,
                               const std::vector<int>& targets,
                               const std::vector<bool>& mask);

// --- parameters and optimization ----------------------------------------

struct Param {
    std::string name;
    TensorPtr tensor;
    bool frozen = false;
};

struct ParamStore {
    std::vector<Param> params;

    Param& add(const std::string& name, TensorPtr t, bool frozen);
    Param* find(const std::string& name);
    const Param* find(const std::string& name) const;
    std::vector<TensorPtr> trainable() const;
    std::size_t trainable_scalar_count() const;
    void zero_grads();
    // FNV-1a over raw bytes of every frozen parameter, in store order.
    std::uint64_t frozen_digest() const;
    std::uint64_t digest_all() const;
};

enum class OptKind { Sgd, Adam };

class Optimizer {
public:
    Optimizer(OptKind kind, double learning_rate, double beta1 = 0.9,
              double beta2 = 0.999, double eps = 1e-8);
    // Updates trainable params only and zeroes their gradients.
    void step(ParamStore& store);
    int step_count() const { return step_count_; }

private:
    OptKind kind_;
    double lr_, beta1_, beta2_, eps_;
    int step_count_ = 0;
    // keyed by parameter name
    struct Moments {
        std::vector<double> m, v;
    };
    std::vector<std::pair<std::string, Moments>> moments_;
    Moments& moments_for(const Param& p);
};

// --- checkpoint io --------------------------------------------------------

// Text header (version + manifest: name, shape, freeze flag) followed by
// little-endian float64 payload in manifest order. Bit-exact round-trip.
void save_checkpoint(const std::string& path, const ParamStore& store);
// Loads into an existing store; names and shapes must match exactly.
void load_checkpoint(const std::string& path, ParamStore& store);
// Reads just the manifest (name, shape, frozen) without requiring a store.
struct ManifestEntry {
    std::string name;
    std::vector<int> shape;
    bool frozen;
};
std::vector<ManifestEntry> read_checkpoint_manifest(const std::string& path);

std::uint64_t fnv1a64(const void* bytes, std::size_t len,
                      std::uint64_t seed = 1469598103934665603ull);

}  // namespace tinyvlm

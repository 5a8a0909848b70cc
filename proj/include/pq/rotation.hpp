#pragma once

#include "pq/tensor.hpp"

namespace pq {

enum class RotationSite { R1, R2, R3, R4 };

/// Random-sign Walsh-Hadamard rotation: Q = diag(sign) * H / sqrt(dim).
/// Orthogonal by construction; dim must be a power of two.
struct HadamardSpec {
  int dim = 0;
  std::vector<float> sign_diag;  // entries in {-1, +1}
  RotationSite site = RotationSite::R1;

  static HadamardSpec make(int dim, RotationSite site, uint64_t seed);
};

bool is_power_of_two(int n);

/// In-place-style fast Walsh-Hadamard transform over the last extent,
/// scaled by 1/sqrt(dim). Involutive under this scaling.
Tensor wht(const Tensor& x);

/// Applies x -> x * Q with Q = diag(sign) * H / sqrt(dim), rows as vectors
/// (sign flip first, then the butterfly). Online path for R3/R4 sites.
Tensor online_rotate(const Tensor& x, const HadamardSpec& spec);

/// Applies x -> x * Q^T (butterfly first, then the sign flip).
Tensor online_rotate_inverse(const Tensor& x, const HadamardSpec& spec);

/// Explicit dim x dim matrix Q, for oracle checks on small dims.
Tensor materialize(const HadamardSpec& spec);

}  // namespace pq

#include "pq/model.hpp"

namespace pq {

/// Fuses the absorbable rotations into the weights so the FP32 function is
/// unchanged: R1 rotates the residual stream (embedding and every linear
/// touching it), R2 rotates o_proj inputs head-wise via v_proj. Norm gains
/// are folded into the adjacent linears first. `inverse` applies Q^T
/// instead of Q, undoing a previous absorption.
ToyModel absorb_rotations(const ToyModel& model, const HadamardSpec& r1, const HadamardSpec& r2,
                          bool inverse = false);

/// Fuses the R4 inverse into down_proj; forward() then applies the online
/// x -> x*Q4 on the down_proj input so the block output is preserved.
ToyModel fuse_r4(const ToyModel& model, const HadamardSpec& r4, bool inverse = false);

/// Applies the requested rotation set (specs derived from `seed`) and
/// records the activation flags in the model's rotation state.
ToyModel apply_rotations(const ToyModel& model, uint64_t seed, bool r1, bool r2, bool r3, bool r4);

}  // namespace pq

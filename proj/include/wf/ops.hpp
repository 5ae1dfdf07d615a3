#pragma once

#include "wf/tape.hpp"

#include <memory>
#include <vector>

namespace wf {

// Every op validates shapes up front (throwing std::invalid_argument that
// names the offending dimension) and records its backward rule on the tape.

// Elementwise / scalar algebra. add/sub/mul require identical shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var affine(Var x, double scale, double shift);
Var reciprocal(Var x);
Var sigmoid(Var x);
Var relu(Var x);
Var gelu(Var x);

// Reductions to a rank-0 scalar.
Var sum_all(Var x);
Var mean_all(Var x);

// Shape and indexing.
Var reshape(Var x, Shape shape);
Var select_row(Var x, Index row);                  // [R,C] -> [C]
Var slice_cols(Var x, Index start, Index count);   // [R,C] -> [R,count]
// out[i] = x[map[i]]; the map is an arbitrary injective-or-not index table.
Var gather(Var x, Shape out_shape, std::shared_ptr<const std::vector<Index>> map);

// Broadcast scaling by a rank-1 factor along the first / last axis.
Var scale_axis0(Var x, Var s);
Var scale_last(Var x, Var s);

// Dense layers.
Var matmul(Var a, Var b);                          // [M,K]x[K,N]
Var linear(Var x, Var w, Var b);                   // [B,Fin]x[Fin,Fout]+[Fout]
Var conv2d(Var x, Var k, Var b, int stride, int pad);  // NCHW, kernel [Cout,Cin,KH,KW]
Var maxpool2d(Var x, int window);                  // stride == window, no padding
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var softmax_lastdim(Var x);
// Mean cross-entropy of logits [B,C] against integer labels, max-stabilized.
Var softmax_cross_entropy(Var logits, std::vector<int> labels);
// Batched matmul over leading groups: [G,M,K]x[G,K,N] ([G,N,K] if transpose_b).
Var bmm(Var a, Var b, bool transpose_b = false);

// Token plumbing for the transformer. Token tensors are [B*T, D] with
// batch-major row blocks; `tokens` is T.
Var patchify(Var x, int patch);                    // [B,C,H,W] -> [B*T, C*p*p]
Var prepend_cls(Var x, Var cls, Index tokens);     // adds a leading class token per block
Var add_pos(Var x, Var pos, Index tokens);         // pos [T,D] broadcast over blocks
Var split_heads(Var x, int heads, Index tokens);   // [B*T,D] -> [B*h, T, D/h]
Var merge_heads(Var x, int heads, Index tokens);   // inverse of split_heads
Var take_cls(Var x, Index tokens);                 // first row of each block -> [B,D]
// Scaled dot-product self-attention over a fused [B*T, 3D] QKV block,
// composed from the primitives above.
Var attention(Var qkv, int heads, Index tokens);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

}  // namespace wf

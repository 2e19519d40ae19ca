#include "residen/ops.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <random>

namespace residen {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
using NodePtr = std::shared_ptr<TensorNode<T>>;

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op, const char* arg) {
  if (!x.defined()) throw DimensionError(std::string(op) + ": " + arg + " is undefined");
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + arg + " must have rank " + std::to_string(rank) +
                         ", got shape " + shape_str(x.shape()));
  }
}

template <typename T>
void require_finite(const Tensor<T>& x, const char* op) {
  for (T v : x.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input value");
  }
}

template <typename T>
bool wants_grad(const NodePtr<T>& n) {
  return n != nullptr && n->requires_grad;
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

// x_n[C,H,W] -> col[C*kh*kw, Ho*Wo]
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, int stride, int pad, std::size_t Ho, std::size_t Wo, T* col) {
  const std::size_t cols = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col + ((c * kh + ki) * kw + kj) * cols;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh) * stride - pad + static_cast<long>(ki);
          T* dst = row + oh * Wo;
          if (ih < 0 || ih >= static_cast<long>(H)) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(ih)) * W;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow) * stride - pad + static_cast<long>(kj);
            dst[ow] = (iw >= 0 && iw < static_cast<long>(W)) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t kh,
            std::size_t kw, int stride, int pad, std::size_t Ho, std::size_t Wo, T* dx) {
  const std::size_t cols = Ho * Wo;
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = col + ((c * kh + ki) * kw + kj) * cols;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const long ih = static_cast<long>(oh) * stride - pad + static_cast<long>(ki);
          if (ih < 0 || ih >= static_cast<long>(H)) continue;
          T* dst = dx + (c * H + static_cast<std::size_t>(ih)) * W;
          const T* src = row + oh * Wo;
          for (std::size_t ow = 0; ow < Wo; ++ow) {
            const long iw = static_cast<long>(ow) * stride - pad + static_cast<long>(kj);
            if (iw >= 0 && iw < static_cast<long>(W)) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace

Activation parse_activation(std::string_view name) {
  if (name == "swish") return Activation::Swish;
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "relu") return Activation::Relu;
  if (name == "linear") return Activation::Linear;
  throw ConfigError("unknown activation kind '" + std::string(name) + "'");
}

std::string to_string(Activation kind) {
  switch (kind) {
    case Activation::Swish: return "swish";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Relu: return "relu";
    case Activation::Linear: return "linear";
  }
  return "unknown";
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  require_rank(x, 4, "conv2d", "input");
  require_rank(w, 4, "conv2d", "weight");
  if (stride < 1 || pad < 0) throw ConfigError("conv2d: stride must be >= 1 and pad >= 0");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C) {
    throw DimensionError("conv2d: input has " + std::to_string(C) + " channels but weight " +
                         shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)));
  }
  if (kh > H + 2 * static_cast<std::size_t>(pad) || kw > W + 2 * static_cast<std::size_t>(pad)) {
    throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != K)) {
    throw DimensionError("conv2d: bias shape " + shape_str(b.shape()) + " does not match " +
                         std::to_string(K) + " output channels");
  }
  require_finite(x, "conv2d");

  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  const std::size_t patch = C * kh * kw;
  const std::size_t cols = Ho * Wo;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  std::vector<T> out(N * K * cols);
  std::vector<T> col(pointwise ? 0 : patch * cols);
  ConstMatMap<T> wm(w.data().data(), K, patch);
  for (std::size_t n = 0; n < N; ++n) {
    const T* xn = x.data().data() + n * C * H * W;
    const T* colp = xn;
    if (!pointwise) {
      im2col(xn, C, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
      colp = col.data();
    }
    MatMap<T> ym(out.data() + n * K * cols, K, cols);
    ym.noalias() = wm * ConstMatMap<T>(colp, patch, cols);
    if (b.defined()) {
      for (std::size_t k = 0; k < K; ++k) ym.row(k).array() += b.data()[k];
    }
  }
  Tensor<T> y(Shape{N, K, Ho, Wo}, std::move(out));

  if (Tape<T>::should_record({&x, &w, &b})) {
    NodePtr<T> xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node();
    Tape<T>::active()->record("conv2d", {xn, wn, bn}, yn, [=]() {
      const auto& dy = yn->grad;
      std::vector<T> colbuf(pointwise ? 0 : patch * cols);
      std::vector<T> dcol(pointwise ? 0 : patch * cols);
      ConstMatMap<T> wmat(wn->data.data(), K, patch);
      for (std::size_t n = 0; n < N; ++n) {
        ConstMatMap<T> dym(dy.data() + n * K * cols, K, cols);
        const T* xin = xn->data.data() + n * C * H * W;
        if (wants_grad(wn)) {
          const T* colp = xin;
          if (!pointwise) {
            im2col(xin, C, H, W, kh, kw, stride, pad, Ho, Wo, colbuf.data());
            colp = colbuf.data();
          }
          MatMap<T> dw(grad_buffer(*wn).data(), K, patch);
          dw.noalias() += dym * ConstMatMap<T>(colp, patch, cols).transpose();
        }
        if (wants_grad(bn)) {
          auto& db = grad_buffer(*bn);
          for (std::size_t k = 0; k < K; ++k) db[k] += dym.row(k).sum();
        }
        if (wants_grad(xn)) {
          T* dx = grad_buffer(*xn).data() + n * C * H * W;
          if (pointwise) {
            MatMap<T>(dx, patch, cols).noalias() += wmat.transpose() * dym;
          } else {
            MatMap<T>(dcol.data(), patch, cols).noalias() = wmat.transpose() * dym;
            col2im(dcol.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, dx);
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
MaxPoolResult<T> maxpool2d_with_indices(const Tensor<T>& x, int k, int stride) {
  require_rank(x, 4, "maxpool2d", "input");
  if (k < 1 || stride < 1) throw ConfigError("maxpool2d: kernel and stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto ks = static_cast<std::size_t>(k);
  if (ks > H || ks > W) {
    throw DimensionError("maxpool2d: kernel " + std::to_string(k) + " exceeds input " +
                         shape_str(x.shape()));
  }
  const std::size_t Ho = (H - ks) / stride + 1, Wo = (W - ks) / stride + 1;
  std::vector<T> out(N * C * Ho * Wo);
  std::vector<std::uint32_t> argmax(out.size());
  const T* xd = x.data().data();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow, ++o) {
        std::size_t best = base + (oh * stride) * W + ow * stride;
        for (std::size_t i = 0; i < ks; ++i) {
          for (std::size_t j = 0; j < ks; ++j) {
            const std::size_t idx = base + (oh * stride + i) * W + ow * stride + j;
            if (xd[idx] > xd[best]) best = idx;
          }
        }
        out[o] = xd[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  MaxPoolResult<T> result{Tensor<T>(Shape{N, C, Ho, Wo}, std::move(out)), std::move(argmax)};
  if (Tape<T>::should_record({&x})) {
    NodePtr<T> xn = x.node(), yn = result.output.node();
    auto idx = std::make_shared<std::vector<std::uint32_t>>(result.argmax);
    Tape<T>::active()->record("maxpool2d", {xn}, yn, [xn, yn, idx]() {
      auto& dx = grad_buffer(*xn);
      for (std::size_t i = 0; i < idx->size(); ++i) dx[(*idx)[i]] += yn->grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> avgpool2d(const Tensor<T>& x, int k, int stride) {
  require_rank(x, 4, "avgpool2d", "input");
  if (k < 1 || stride < 1) throw ConfigError("avgpool2d: kernel and stride must be >= 1");
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto ks = static_cast<std::size_t>(k);
  if (ks > H || ks > W) {
    throw DimensionError("avgpool2d: kernel " + std::to_string(k) + " exceeds input " +
                         shape_str(x.shape()));
  }
  const std::size_t Ho = (H - ks) / stride + 1, Wo = (W - ks) / stride + 1;
  const T inv = T(1) / static_cast<T>(ks * ks);
  std::vector<T> out(N * C * Ho * Wo);
  const T* xd = x.data().data();
  std::size_t o = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow, ++o) {
        T acc = 0;
        for (std::size_t i = 0; i < ks; ++i) {
          for (std::size_t j = 0; j < ks; ++j) acc += xd[base + (oh * stride + i) * W + ow * stride + j];
        }
        out[o] = acc * inv;
      }
    }
  }
  Tensor<T> y(Shape{N, C, Ho, Wo}, std::move(out));
  if (Tape<T>::should_record({&x})) {
    NodePtr<T> xn = x.node(), yn = y.node();
    Tape<T>::active()->record("avgpool2d", {xn}, yn, [=]() {
      auto& dx = grad_buffer(*xn);
      std::size_t o2 = 0;
      for (std::size_t nc = 0; nc < N * C; ++nc) {
        const std::size_t base = nc * H * W;
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          for (std::size_t ow = 0; ow < Wo; ++ow, ++o2) {
            const T g = yn->grad[o2] * inv;
            for (std::size_t i = 0; i < ks; ++i) {
              for (std::size_t j = 0; j < ks; ++j) dx[base + (oh * stride + i) * W + ow * stride + j] += g;
            }
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(x, 2, "dense", "input");
  require_rank(w, 2, "dense", "weight");
  const std::size_t N = x.dim(0), F = x.dim(1), U = w.dim(1);
  if (w.dim(0) != F) {
    throw DimensionError("dense: input width " + std::to_string(F) + " does not match weight " +
                         shape_str(w.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != U)) {
    throw DimensionError("dense: bias shape " + shape_str(b.shape()) + " does not match " +
                         std::to_string(U) + " units");
  }
  require_finite(x, "dense");
  std::vector<T> out(N * U);
  MatMap<T> ym(out.data(), N, U);
  ym.noalias() = ConstMatMap<T>(x.data().data(), N, F) * ConstMatMap<T>(w.data().data(), F, U);
  if (b.defined()) {
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(b.data().data(), U);
    ym.rowwise() += bv;
  }
  Tensor<T> y(Shape{N, U}, std::move(out));
  if (Tape<T>::should_record({&x, &w, &b})) {
    NodePtr<T> xn = x.node(), wn = w.node(), bn = b.node(), yn = y.node();
    Tape<T>::active()->record("dense", {xn, wn, bn}, yn, [=]() {
      ConstMatMap<T> dy(yn->grad.data(), N, U);
      if (wants_grad(xn)) {
        MatMap<T>(grad_buffer(*xn).data(), N, F).noalias() +=
            dy * ConstMatMap<T>(wn->data.data(), F, U).transpose();
      }
      if (wants_grad(wn)) {
        MatMap<T>(grad_buffer(*wn).data(), F, U).noalias() +=
            ConstMatMap<T>(xn->data.data(), N, F).transpose() * dy;
      }
      if (wants_grad(bn)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(grad_buffer(*bn).data(), U);
        db += dy.colwise().sum();
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, double momentum,
                      double eps) {
  require_rank(x, 4, "batchnorm2d", "input");
  const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  for (const Tensor<T>* p : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (!p->defined() || p->rank() != 1 || p->dim(0) != C) {
      throw DimensionError("batchnorm2d: per-channel tensors must have shape [" +
                           std::to_string(C) + "]");
    }
  }
  const std::size_t M = N * HW;
  if (mode == Mode::Train && M < 2) {
    throw ConfigError("batchnorm2d: train mode needs at least 2 values per channel, got shape " +
                      shape_str(x.shape()));
  }
  const T* xd = x.data().data();
  std::vector<T> mu(C), invstd(C);
  if (mode == Mode::Train) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xd + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(M);
      double ss = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xd + (n * C + c) * HW;
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = p[i] - m;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(M);
      mu[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
      rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * m);
      rv[c] = static_cast<T>((1.0 - momentum) * rv[c] +
                             momentum * ss / static_cast<double>(M - 1));
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mu[c] = running_mean.data()[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var.data()[c]) + eps));
    }
  }

  std::vector<T> out(x.numel());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (n * C + c) * HW;
      const T g = gamma.data()[c], bt = beta.data()[c];
      for (std::size_t i = 0; i < HW; ++i) out[off + i] = (xd[off + i] - mu[c]) * invstd[c] * g + bt;
    }
  }
  Tensor<T> y(x.shape(), std::move(out));

  if (Tape<T>::should_record({&x, &gamma, &beta})) {
    NodePtr<T> xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node();
    const bool train = mode == Mode::Train;
    Tape<T>::active()->record("batchnorm2d", {xn, gn, bn}, yn, [=]() {
      const auto& dy = yn->grad;
      const T* xv = xn->data.data();
      for (std::size_t c = 0; c < C; ++c) {
        T sum_dy = 0, sum_dy_xhat = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            const T xhat = (xv[off + i] - mu[c]) * invstd[c];
            sum_dy += dy[off + i];
            sum_dy_xhat += dy[off + i] * xhat;
          }
        }
        if (wants_grad(gn)) grad_buffer(*gn)[c] += sum_dy_xhat;
        if (wants_grad(bn)) grad_buffer(*bn)[c] += sum_dy;
        if (!wants_grad(xn)) continue;
        auto& dx = grad_buffer(*xn);
        const T g = gn->data[c];
        const T inv_m = T(1) / static_cast<T>(M);
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t off = (n * C + c) * HW;
          for (std::size_t i = 0; i < HW; ++i) {
            if (train) {
              const T xhat = (xv[off + i] - mu[c]) * invstd[c];
              dx[off + i] += g * invstd[c] * inv_m *
                             (static_cast<T>(M) * dy[off + i] - sum_dy - xhat * sum_dy_xhat);
            } else {
              dx[off + i] += g * invstd[c] * dy[off + i];
            }
          }
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> activation(Activation kind, const Tensor<T>& x) {
  if (kind == Activation::Linear) return x;
  const auto xd = x.data();
  std::vector<T> out(xd.size());
  switch (kind) {
    case Activation::Swish:
      for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * sigmoid_scalar(xd[i]);
      break;
    case Activation::Sigmoid:
      for (std::size_t i = 0; i < xd.size(); ++i) out[i] = sigmoid_scalar(xd[i]);
      break;
    case Activation::Relu:
      for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > T(0) ? xd[i] : T(0);
      break;
    case Activation::Linear:
      break;
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (Tape<T>::should_record({&x})) {
    NodePtr<T> xn = x.node(), yn = y.node();
    Tape<T>::active()->record(to_string(kind), {xn}, yn, [xn, yn, kind]() {
      auto& dx = grad_buffer(*xn);
      const auto& dy = yn->grad;
      const auto& xv = xn->data;
      for (std::size_t i = 0; i < dx.size(); ++i) {
        T d = 0;
        if (kind == Activation::Swish) {
          const T s = sigmoid_scalar(xv[i]);
          d = s + xv[i] * s * (T(1) - s);
        } else if (kind == Activation::Sigmoid) {
          const T s = yn->data[i];
          d = s * (T(1) - s);
        } else {
          d = xv[i] > T(0) ? T(1) : T(0);
        }
        dx[i] += d * dy[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  require_rank(x, 2, "softmax", "input");
  const std::size_t N = x.dim(0), K = x.dim(1);
  std::vector<T> out(N * K);
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = x.data().data() + n * K;
    const T mx = *std::max_element(row, row + K);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) {
      out[n * K + k] = std::exp(row[k] - mx);
      s += out[n * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] /= s;
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (Tape<T>::should_record({&x})) {
    NodePtr<T> xn = x.node(), yn = y.node();
    Tape<T>::active()->record("softmax", {xn}, yn, [=]() {
      auto& dx = grad_buffer(*xn);
      for (std::size_t n = 0; n < N; ++n) {
        T dot = 0;
        for (std::size_t k = 0; k < K; ++k) dot += yn->grad[n * K + k] * yn->data[n * K + k];
        for (std::size_t k = 0; k < K; ++k) {
          dx[n * K + k] += yn->data[n * K + k] * (yn->grad[n * K + k] - dot);
        }
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw DimensionError("concat_channels: no inputs");
  const Tensor<T>& first = xs.front();
  if (!first.defined() || first.rank() < 2) throw DimensionError("concat_channels: inputs need rank >= 2");
  const std::size_t N = first.dim(0);
  const std::size_t inner = first.numel() / (N * first.dim(1));
  std::size_t total = 0;
  for (const auto& t : xs) {
    bool ok = t.defined() && t.rank() == first.rank() && t.dim(0) == N;
    for (std::size_t d = 2; ok && d < first.rank(); ++d) ok = t.dim(d) == first.dim(d);
    if (!ok) {
      throw DimensionError("concat_channels: shape " + (t.defined() ? shape_str(t.shape()) : "<undefined>") +
                           " incompatible with " + shape_str(first.shape()));
    }
    total += t.dim(1);
  }
  Shape shape = first.shape();
  shape[1] = total;
  std::vector<T> out(shape_numel(shape));
  std::size_t offset = 0;
  for (const auto& t : xs) {
    const std::size_t chunk = t.dim(1) * inner;
    for (std::size_t n = 0; n < N; ++n) {
      std::copy_n(t.data().data() + n * chunk, chunk, out.data() + n * total * inner + offset);
    }
    offset += chunk;
  }
  Tensor<T> y(shape, std::move(out));
  if (Tape<T>::should_record(xs)) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& t : xs) nodes.push_back(t.node());
    NodePtr<T> yn = y.node();
    Tape<T>::active()->record("concat_channels", nodes, yn, [=]() {
      std::size_t off = 0;
      for (const auto& in : nodes) {
        const std::size_t chunk = in->shape[1] * inner;
        if (in->requires_grad) {
          auto& dx = grad_buffer(*in);
          for (std::size_t n = 0; n < N; ++n) {
            const T* src = yn->grad.data() + n * total * inner + off;
            T* dst = dx.data() + n * chunk;
            for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
          }
        }
        off += chunk;
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> residual_add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) {
    throw DimensionError("residual_add: shape mismatch " +
                         (a.defined() ? shape_str(a.shape()) : "<undefined>") + " vs " +
                         (b.defined() ? shape_str(b.shape()) : "<undefined>"));
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  Tensor<T> y(a.shape(), std::move(out));
  if (Tape<T>::should_record({&a, &b})) {
    NodePtr<T> an = a.node(), bn = b.node(), yn = y.node();
    Tape<T>::active()->record("residual_add", {an, bn}, yn, [an, bn, yn]() {
      for (const auto& in : {an, bn}) {
        if (!in->requires_grad) continue;
        auto& dx = grad_buffer(*in);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += yn->grad[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.defined() || !b.defined() || a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch");
  }
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  Tensor<T> y(a.shape(), std::move(out));
  if (Tape<T>::should_record({&a, &b})) {
    NodePtr<T> an = a.node(), bn = b.node(), yn = y.node();
    Tape<T>::active()->record("mul", {an, bn}, yn, [an, bn, yn]() {
      if (an->requires_grad) {
        auto& da = grad_buffer(*an);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += yn->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        auto& db = grad_buffer(*bn);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += yn->grad[i] * an->data[i];
      }
    });
  }
  return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * factor;
  Tensor<T> y(x.shape(), std::move(out));
  if (Tape<T>::should_record({&x})) {
    NodePtr<T> xn = x.node(), yn = y.node();
    Tape<T>::active()->record("scale", {xn}, yn, [xn, yn, factor]() {
      auto& dx = grad_buffer(*xn);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += yn->grad[i] * factor;
    });
  }
  return y;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  Tensor<T> y = Tensor<T>::scalar(acc);
  if (Tape<T>::should_record({&x})) {
    NodePtr<T> xn = x.node(), yn = y.node();
    Tape<T>::active()->record("sum", {xn}, yn, [xn, yn]() {
      auto& dx = grad_buffer(*xn);
      for (auto& d : dx) d += yn->grad[0];
    });
  }
  return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::Eval || p == 0.0) return x;
  std::mt19937_64 rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    mask[i] = u < p ? T(0) : keep_scale;
    out[i] = x.data()[i] * mask[i];
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (Tape<T>::should_record({&x})) {
    NodePtr<T> xn = x.node(), yn = y.node();
    auto m = std::make_shared<std::vector<T>>(std::move(mask));
    Tape<T>::active()->record("dropout", {xn}, yn, [xn, yn, m]() {
      auto& dx = grad_buffer(*xn);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += yn->grad[i] * (*m)[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> y(shape, std::vector<T>(x.data().begin(), x.data().end()));
  if (Tape<T>::should_record({&x})) {
    NodePtr<T> xn = x.node(), yn = y.node();
    Tape<T>::active()->record("reshape", {xn}, yn, [xn, yn]() {
      auto& dx = grad_buffer(*xn);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += yn->grad[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
  if (!x.defined() || x.rank() < 1) throw DimensionError("flatten: undefined input");
  return reshape(x, Shape{x.dim(0), x.numel() / x.dim(0)});
}

template <typename T>
Tensor<T> bce_multilabel_loss(const Tensor<T>& p, const Tensor<T>& y) {
  if (!p.defined() || !y.defined() || p.shape() != y.shape() || p.rank() != 2) {
    throw DimensionError("bce_multilabel_loss: probabilities and labels must share a [N,A] shape");
  }
  for (T v : y.data()) {
    if (v != T(0) && v != T(1)) throw LabelError("bce_multilabel_loss: labels must be 0 or 1");
  }
  const T lo = static_cast<T>(kBceClamp), hi = static_cast<T>(1.0 - kBceClamp);
  const std::size_t M = p.numel();
  double acc = 0;
  for (std::size_t i = 0; i < M; ++i) {
    const double pc = std::clamp(p.data()[i], lo, hi);
    acc -= y.data()[i] != T(0) ? std::log(pc) : std::log(1.0 - pc);
  }
  Tensor<T> loss = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(M)));
  if (Tape<T>::should_record({&p})) {
    NodePtr<T> pn = p.node(), yn = y.node(), ln = loss.node();
    Tape<T>::active()->record("bce_multilabel_loss", {pn}, ln, [pn, yn, ln, lo, hi, M]() {
      auto& dp = grad_buffer(*pn);
      const T g = ln->grad[0] / static_cast<T>(M);
      for (std::size_t i = 0; i < M; ++i) {
        const T pv = pn->data[i];
        if (pv < lo || pv > hi) continue;
        dp[i] += yn->data[i] != T(0) ? -g / pv : g / (T(1) - pv);
      }
    });
  }
  return loss;
}

template <typename T>
Tensor<T> crossentropy_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
  require_rank(logits, 2, "crossentropy_loss", "logits");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  if (labels.size() != N) {
    throw DimensionError("crossentropy_loss: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(N) + " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= K) {
      throw LabelError("crossentropy_loss: class index " + std::to_string(l) + " outside [0, " +
                       std::to_string(K) + ")");
    }
  }
  std::vector<T> probs(N * K);
  double acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = logits.data().data() + n * K;
    const T mx = *std::max_element(row, row + K);
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(row[k] - mx));
    const double lse = std::log(s) + mx;
    acc += lse - row[labels[n]];
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = static_cast<T>(std::exp(row[k] - lse));
  }
  Tensor<T> loss = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(N)));
  if (Tape<T>::should_record({&logits})) {
    NodePtr<T> xn = logits.node(), ln = loss.node();
    auto pr = std::make_shared<std::vector<T>>(std::move(probs));
    Tape<T>::active()->record("crossentropy_loss", {xn}, ln, [=]() {
      auto& dx = grad_buffer(*xn);
      const T g = ln->grad[0] / static_cast<T>(N);
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t k = 0; k < K; ++k) {
          const T onehot = static_cast<std::size_t>(labels[n]) == k ? T(1) : T(0);
          dx[n * K + k] += g * ((*pr)[n * K + k] - onehot);
        }
      }
    });
  }
  return loss;
}

template <typename T>
Tensor<T> l1l2_penalty(const std::vector<Tensor<T>>& params, double lambda1, double lambda2) {
  if (lambda1 < 0 || lambda2 < 0) throw ConfigError("l1l2_penalty: lambdas must be >= 0");
  double acc = 0;
  for (const auto& p : params) {
    for (T v : p.data()) acc += lambda1 * std::abs(v) + lambda2 * v * v;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (Tape<T>::should_record(params)) {
    std::vector<NodePtr<T>> nodes;
    for (const auto& p : params) nodes.push_back(p.node());
    NodePtr<T> on = out.node();
    const T l1 = static_cast<T>(lambda1), l2 = static_cast<T>(lambda2);
    Tape<T>::active()->record("l1l2_penalty", nodes, on, [nodes, on, l1, l2]() {
      const T g = on->grad[0];
      for (const auto& n : nodes) {
        if (!n->requires_grad) continue;
        auto& dw = grad_buffer(*n);
        for (std::size_t i = 0; i < dw.size(); ++i) {
          const T v = n->data[i];
          const T sign = v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
          dw[i] += g * (l1 * sign + T(2) * l2 * v);
        }
      }
    });
  }
  return out;
}

#define RESIDEN_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);    \
  template MaxPoolResult<T> maxpool2d_with_indices(const Tensor<T>&, int, int);                 \
  template Tensor<T> avgpool2d(const Tensor<T>&, int, int);                                     \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> batchnorm2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                 Tensor<T>&, Tensor<T>&, Mode, double, double);                 \
  template Tensor<T> activation(Activation, const Tensor<T>&);                                  \
  template Tensor<T> softmax(const Tensor<T>&);                                                 \
  template Tensor<T> concat_channels(const std::vector<Tensor<T>>&);                            \
  template Tensor<T> residual_add(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> dropout(const Tensor<T>&, double, Mode, std::uint64_t);                    \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                   \
  template Tensor<T> flatten(const Tensor<T>&);                                                 \
  template Tensor<T> bce_multilabel_loss(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> crossentropy_loss(const Tensor<T>&, const std::vector<int>&);              \
  template Tensor<T> l1l2_penalty(const std::vector<Tensor<T>>&, double, double);

RESIDEN_INSTANTIATE_OPS(float)
RESIDEN_INSTANTIATE_OPS(double)

#undef RESIDEN_INSTANTIATE_OPS

}  // namespace residen

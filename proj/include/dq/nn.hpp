#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "dq/common.hpp"
#include "dq/tensor.hpp"

namespace dq {

using RowMatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMatF>;
using MapConst = Eigen::Map<const RowMatF>;

// Every trainable tensor is registered under a stable name with a role tag;
// quantization, distillation and stripping all key off this registry.
enum class Role : uint8_t {
    other = 0,
    shortcut_adjacent = 1,  // projections consuming shortcut-concat inputs
    ffn_projection = 2,     // bottleneck feed-forward in/out projections
    time_embedding = 3,     // the shared timestep-embedding MLP
    time_projection = 4,    // per-block projections of the time embedding
};

inline const char* role_name(Role r) {
    switch (r) {
        case Role::other: return "other";
        case Role::shortcut_adjacent: return "shortcut_adjacent";
        case Role::ffn_projection: return "ffn_projection";
        case Role::time_embedding: return "time_embedding";
        case Role::time_projection: return "time_projection";
    }
    return "?";
}

struct Param {
    std::string name;
    Role role = Role::other;
    Tensor w, g;

    void init(std::string n, Role r, std::vector<int> dims) {
        name = std::move(n);
        role = r;
        w = Tensor(dims);
        g = Tensor(dims);
    }
};

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM). Weight layout [cout, cin*k*k], bias [cout].
// forward() remembers the exact weight buffer used so backward can reuse it;
// a quantizer hook may substitute a fake-quantized weight tensor.
// ---------------------------------------------------------------------------
struct Conv2d {
    Param w, b;
    int cin = 0, cout = 0, k = 0, stride = 1, pad = 0;

    // forward cache
    int n = 0, hin = 0, win = 0, hout = 0, wout = 0;
    std::vector<float> col;
    const float* w_used = nullptr;
    bool cached = false;

    // The cache holds a pointer into the caller's effective-weight buffer, so
    // copies must start cold rather than inherit it.
    Conv2d() = default;
    Conv2d(const Conv2d& o) { *this = o; }
    Conv2d& operator=(const Conv2d& o) {
        if (this == &o) return *this;
        w = o.w;
        b = o.b;
        cin = o.cin;
        cout = o.cout;
        k = o.k;
        stride = o.stride;
        pad = o.pad;
        n = hin = win = hout = wout = 0;
        col.clear();
        w_used = nullptr;
        cached = false;
        return *this;
    }

    void init(const std::string& name, Role role, int cin_, int cout_, int k_, int stride_,
              int pad_, Rng& rng, bool zero_init = false) {
        cin = cin_;
        cout = cout_;
        k = k_;
        stride = stride_;
        pad = pad_;
        w.init(name + ".w", role, {cout, cin * k * k});
        b.init(name + ".b", role, {cout});
        if (!zero_init) {
            float s = std::sqrt(1.0f / static_cast<float>(cin * k * k));
            w.w.fill_normal(rng, s);
        }
    }

    void im2col(const Tensor& x) {
        n = x.dim(0);
        hin = x.dim(2);
        win = x.dim(3);
        hout = (hin + 2 * pad - k) / stride + 1;
        wout = (win + 2 * pad - k) / stride + 1;
        const int64_t rows = static_cast<int64_t>(n) * hout * wout;
        const int kk = cin * k * k;
        col.assign(static_cast<size_t>(rows * kk), 0.0f);
        for (int ni = 0; ni < n; ++ni)
            for (int oh = 0; oh < hout; ++oh)
                for (int ow = 0; ow < wout; ++ow) {
                    float* dst = col.data() + ((static_cast<int64_t>(ni) * hout + oh) * wout + ow) * kk;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int kh = 0; kh < k; ++kh) {
                            int h = oh * stride - pad + kh;
                            if (h < 0 || h >= hin) continue;
                            const float* src = x.data() + x.idx4(ni, ci, h, 0);
                            float* d = dst + (ci * k + kh) * k;
                            for (int kw = 0; kw < k; ++kw) {
                                int ww = ow * stride - pad + kw;
                                if (ww >= 0 && ww < win) d[kw] = src[ww];
                            }
                        }
                }
    }

    Tensor forward(const Tensor& x, const Tensor& w_eff, bool train) {
        check(x.ndim() == 4 && x.dim(1) == cin, "conv " + w.name + ": bad input shape");
        check(w_eff.same_shape(w.w), "conv " + w.name + ": bad effective weight shape");
        im2col(x);
        const int64_t rows = static_cast<int64_t>(n) * hout * wout;
        const int kk = cin * k * k;
        Tensor out({n, cout, hout, wout});
        RowMatF out_rows(rows, cout);
        out_rows.noalias() = MapConst(col.data(), rows, kk) * MapConst(w_eff.data(), cout, kk).transpose();
        for (int ni = 0; ni < n; ++ni)
            for (int co = 0; co < cout; ++co) {
                float bias = b.w.v[static_cast<size_t>(co)];
                float* dst = out.data() + out.idx4(ni, co, 0, 0);
                for (int p = 0; p < hout * wout; ++p)
                    dst[p] = out_rows(static_cast<int64_t>(ni) * hout * wout + p, co) + bias;
            }
        w_used = w_eff.data();
        cached = train;
        if (!train) col.clear();
        return out;
    }

    // Returns dx; fills gw_eff (grad wrt the weight buffer used in forward)
    // and accumulates the bias grad.
    Tensor backward(const Tensor& gout, Tensor& gw_eff) {
        check(cached, "conv " + w.name + ": backward without cached forward");
        const int64_t rows = static_cast<int64_t>(n) * hout * wout;
        const int kk = cin * k * k;
        RowMatF g_rows(rows, cout);
        for (int ni = 0; ni < n; ++ni)
            for (int co = 0; co < cout; ++co) {
                const float* src = gout.data() + gout.idx4(ni, co, 0, 0);
                for (int p = 0; p < hout * wout; ++p)
                    g_rows(static_cast<int64_t>(ni) * hout * wout + p, co) = src[p];
            }
        if (!gw_eff.same_shape(w.w)) gw_eff = Tensor(w.w.dims);
        MapMat(gw_eff.data(), cout, kk).noalias() =
            g_rows.transpose() * MapConst(col.data(), rows, kk);
        for (int co = 0; co < cout; ++co) b.g.v[static_cast<size_t>(co)] += g_rows.col(co).sum();

        RowMatF dcol(rows, kk);
        dcol.noalias() = g_rows * MapConst(w_used, cout, kk);
        Tensor dx({n, cin, hin, win});
        for (int ni = 0; ni < n; ++ni)
            for (int oh = 0; oh < hout; ++oh)
                for (int ow = 0; ow < wout; ++ow) {
                    const float* src = dcol.data() + ((static_cast<int64_t>(ni) * hout + oh) * wout + ow) * kk;
                    for (int ci = 0; ci < cin; ++ci)
                        for (int kh = 0; kh < k; ++kh) {
                            int h = oh * stride - pad + kh;
                            if (h < 0 || h >= hin) continue;
                            float* d = dx.data() + dx.idx4(ni, ci, h, 0);
                            const float* srow = src + (ci * k + kh) * k;
                            for (int kw = 0; kw < k; ++kw) {
                                int ww = ow * stride - pad + kw;
                                if (ww >= 0 && ww < win) d[ww] += srow[kw];
                            }
                        }
                }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Fully connected layer on [N, din] inputs. Weight layout [dout, din].
// ---------------------------------------------------------------------------
struct Linear {
    Param w, b;
    int din = 0, dout = 0;
    Tensor x_cache;
    const float* w_used = nullptr;
    bool cached = false;

    void init(const std::string& name, Role role, int din_, int dout_, Rng& rng) {
        din = din_;
        dout = dout_;
        w.init(name + ".w", role, {dout, din});
        b.init(name + ".b", role, {dout});
        w.w.fill_normal(rng, std::sqrt(1.0f / static_cast<float>(din)));
    }

    // Row-by-row evaluation keeps each sample's result independent of the
    // batch size, which the time-cache equivalence guarantee relies on.
    Tensor forward(const Tensor& x, const Tensor& w_eff, bool train) {
        check(x.ndim() == 2 && x.dim(1) == din, "linear " + w.name + ": bad input shape");
        int N = x.dim(0);
        Tensor out({N, dout});
        MapConst W(w_eff.data(), dout, din);
        for (int i = 0; i < N; ++i) {
            Eigen::Map<Eigen::RowVectorXf> o(out.data() + static_cast<int64_t>(i) * dout, dout);
            Eigen::Map<const Eigen::RowVectorXf> xi(x.data() + static_cast<int64_t>(i) * din, din);
            o.noalias() = xi * W.transpose();
            o += Eigen::Map<const Eigen::RowVectorXf>(b.w.data(), dout);
        }
        w_used = w_eff.data();
        cached = train;
        if (train) x_cache = x;
        return out;
    }

    Tensor backward(const Tensor& gout, Tensor& gw_eff) {
        check(cached, "linear " + w.name + ": backward without cached forward");
        int N = x_cache.dim(0);
        if (!gw_eff.same_shape(w.w)) gw_eff = Tensor(w.w.dims);
        MapMat(gw_eff.data(), dout, din).noalias() =
            MapConst(gout.data(), N, dout).transpose() * MapConst(x_cache.data(), N, din);
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < dout; ++j) b.g.v[static_cast<size_t>(j)] += gout.v[static_cast<size_t>(i) * dout + j];
        Tensor dx({N, din});
        MapMat(dx.data(), N, din).noalias() =
            MapConst(gout.data(), N, dout) * MapConst(w_used, dout, din);
        return dx;
    }
};

// ---------------------------------------------------------------------------
// GroupNorm over (C/groups, H, W) per sample, affine per channel.
// ---------------------------------------------------------------------------
struct GroupNorm {
    Param gamma, beta;
    int ch = 0, groups = 0;
    Tensor xhat;
    std::vector<double> inv_std;
    bool cached = false;

    void init(const std::string& name, Role role, int ch_, int groups_) {
        ch = ch_;
        groups = groups_;
        check(ch % groups == 0, "groupnorm " + name + ": channels not divisible by groups");
        gamma.init(name + ".gamma", role, {ch});
        beta.init(name + ".beta", role, {ch});
        gamma.w.fill(1.0f);
    }

    Tensor forward(const Tensor& x, bool train) {
        check(x.ndim() == 4 && x.dim(1) == ch, "groupnorm " + gamma.name + ": bad input");
        int N = x.dim(0), H = x.dim(2), W = x.dim(3);
        int cg = ch / groups;
        int64_t m = static_cast<int64_t>(cg) * H * W;
        Tensor out(x.dims);
        xhat = Tensor(x.dims);
        inv_std.assign(static_cast<size_t>(N) * groups, 0.0);
        for (int ni = 0; ni < N; ++ni)
            for (int gi = 0; gi < groups; ++gi) {
                double s = 0, s2 = 0;
                for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
                    const float* p = x.data() + x.idx4(ni, c, 0, 0);
                    for (int i = 0; i < H * W; ++i) {
                        s += p[i];
                        s2 += static_cast<double>(p[i]) * p[i];
                    }
                }
                double mu = s / static_cast<double>(m);
                double var = s2 / static_cast<double>(m) - mu * mu;
                double inv = 1.0 / std::sqrt(var + 1e-5);
                inv_std[static_cast<size_t>(ni) * groups + gi] = inv;
                for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
                    const float* p = x.data() + x.idx4(ni, c, 0, 0);
                    float* xh = xhat.data() + xhat.idx4(ni, c, 0, 0);
                    float* o = out.data() + out.idx4(ni, c, 0, 0);
                    float ga = gamma.w.v[static_cast<size_t>(c)], be = beta.w.v[static_cast<size_t>(c)];
                    for (int i = 0; i < H * W; ++i) {
                        xh[i] = static_cast<float>((p[i] - mu) * inv);
                        o[i] = ga * xh[i] + be;
                    }
                }
            }
        cached = train;
        return out;
    }

    Tensor backward(const Tensor& gout) {
        check(cached, "groupnorm " + gamma.name + ": backward without forward");
        int N = gout.dim(0), H = gout.dim(2), W = gout.dim(3);
        int cg = ch / groups;
        int64_t m = static_cast<int64_t>(cg) * H * W;
        Tensor dx(gout.dims);
        for (int ni = 0; ni < N; ++ni)
            for (int gi = 0; gi < groups; ++gi) {
                double sum_dxhat = 0, sum_dxhat_xhat = 0;
                for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
                    const float* go = gout.data() + gout.idx4(ni, c, 0, 0);
                    const float* xh = xhat.data() + xhat.idx4(ni, c, 0, 0);
                    float ga = gamma.w.v[static_cast<size_t>(c)];
                    double dg = 0, db = 0;
                    for (int i = 0; i < H * W; ++i) {
                        double dxh = static_cast<double>(go[i]) * ga;
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xh[i];
                        dg += static_cast<double>(go[i]) * xh[i];
                        db += go[i];
                    }
                    gamma.g.v[static_cast<size_t>(c)] += static_cast<float>(dg);
                    beta.g.v[static_cast<size_t>(c)] += static_cast<float>(db);
                }
                double inv = inv_std[static_cast<size_t>(ni) * groups + gi];
                for (int c = gi * cg; c < (gi + 1) * cg; ++c) {
                    const float* go = gout.data() + gout.idx4(ni, c, 0, 0);
                    const float* xh = xhat.data() + xhat.idx4(ni, c, 0, 0);
                    float* d = dx.data() + dx.idx4(ni, c, 0, 0);
                    float ga = gamma.w.v[static_cast<size_t>(c)];
                    for (int i = 0; i < H * W; ++i) {
                        double dxh = static_cast<double>(go[i]) * ga;
                        d[i] = static_cast<float>(inv * (dxh - sum_dxhat / m - xh[i] * sum_dxhat_xhat / m));
                    }
                }
            }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// SiLU with cached input (works on any shape).
// ---------------------------------------------------------------------------
struct SiLU {
    Tensor x_cache;
    bool cached = false;

    Tensor forward(const Tensor& x, bool train) {
        Tensor out(x.dims);
        for (size_t i = 0; i < x.v.size(); ++i) out.v[i] = x.v[i] * sigmoidf(x.v[i]);
        cached = train;
        if (train) x_cache = x;
        return out;
    }
    Tensor backward(const Tensor& gout) {
        check(cached, "silu: backward without forward");
        Tensor dx(gout.dims);
        for (size_t i = 0; i < gout.v.size(); ++i) {
            float s = sigmoidf(x_cache.v[i]);
            dx.v[i] = gout.v[i] * s * (1.0f + x_cache.v[i] * (1.0f - s));
        }
        return dx;
    }
};

// ---------------------------------------------------------------------------
// Class-embedding table [num_ids, dim].
// ---------------------------------------------------------------------------
struct Embedding {
    Param table;
    int num_ids = 0, dim = 0;
    std::vector<int> ids_cache;

    void init(const std::string& name, Role role, int num_ids_, int dim_, Rng& rng) {
        num_ids = num_ids_;
        dim = dim_;
        table.init(name, role, {num_ids, dim});
        table.w.fill_normal(rng, 0.05f);
    }
    Tensor forward(const std::vector<int>& ids, bool train) {
        Tensor out({static_cast<int>(ids.size()), dim});
        for (size_t i = 0; i < ids.size(); ++i) {
            check(ids[i] >= 0 && ids[i] < num_ids, "embedding: id out of range");
            std::copy_n(table.w.data() + static_cast<int64_t>(ids[i]) * dim, dim,
                        out.data() + static_cast<int64_t>(i) * dim);
        }
        if (train) ids_cache = ids;
        return out;
    }
    void backward(const Tensor& gout) {
        for (size_t i = 0; i < ids_cache.size(); ++i) {
            float* g = table.g.data() + static_cast<int64_t>(ids_cache[i]) * dim;
            const float* src = gout.data() + static_cast<int64_t>(i) * dim;
            for (int j = 0; j < dim; ++j) g[j] += src[j];
        }
    }
};

// Sinusoidal timestep features: [sin(t f_i), cos(t f_i)] with log-spaced f_i.
inline void sinusoidal_embed(int t, int dim, float* out) {
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        out[i] = static_cast<float>(std::sin(t * freq));
        out[half + i] = static_cast<float>(std::cos(t * freq));
    }
}

inline Tensor sinusoidal_embed_batch(const std::vector<int>& ts, int dim) {
    Tensor out({static_cast<int>(ts.size()), dim});
    for (size_t i = 0; i < ts.size(); ++i)
        sinusoidal_embed(ts[i], dim, out.data() + static_cast<int64_t>(i) * dim);
    return out;
}

// ---------------------------------------------------------------------------
// Spatial helpers.
// ---------------------------------------------------------------------------
inline Tensor upsample_nearest2x(const Tensor& x) {
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out({N, C, H * 2, W * 2});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H * 2; ++h) {
                const float* src = x.data() + x.idx4(n, c, h / 2, 0);
                float* dst = out.data() + out.idx4(n, c, h, 0);
                for (int w = 0; w < W * 2; ++w) dst[w] = src[w / 2];
            }
    return out;
}

inline Tensor upsample_nearest2x_backward(const Tensor& gout) {
    int N = gout.dim(0), C = gout.dim(1), H = gout.dim(2) / 2, W = gout.dim(3) / 2;
    Tensor dx({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < 2 * H; ++h) {
                const float* src = gout.data() + gout.idx4(n, c, h, 0);
                float* dst = dx.data() + dx.idx4(n, c, h / 2, 0);
                for (int w = 0; w < 2 * W; ++w) dst[w / 2] += src[w];
            }
    return dx;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat: incompatible shapes");
    int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    Tensor out({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.data() + a.idx4(n, 0, 0, 0), static_cast<int64_t>(Ca) * H * W,
                    out.data() + out.idx4(n, 0, 0, 0));
        std::copy_n(b.data() + b.idx4(n, 0, 0, 0), static_cast<int64_t>(Cb) * H * W,
                    out.data() + out.idx4(n, Ca, 0, 0));
    }
    return out;
}

inline void split_channels_backward(const Tensor& gout, int ca, Tensor& ga, Tensor& gb) {
    int N = gout.dim(0), C = gout.dim(1), H = gout.dim(2), W = gout.dim(3);
    ga = Tensor({N, ca, H, W});
    gb = Tensor({N, C - ca, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(gout.data() + gout.idx4(n, 0, 0, 0), static_cast<int64_t>(ca) * H * W,
                    ga.data() + ga.idx4(n, 0, 0, 0));
        std::copy_n(gout.data() + gout.idx4(n, ca, 0, 0), static_cast<int64_t>(C - ca) * H * W,
                    gb.data() + gb.idx4(n, 0, 0, 0));
    }
}

// Adds inj (shape [N, C]) to every spatial position of x (shape [N, C, H, W]).
inline void add_per_channel(Tensor& x, const Tensor& inj) {
    int N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float a = inj.v[static_cast<size_t>(n) * C + c];
            float* p = x.data() + x.idx4(n, c, 0, 0);
            for (int i = 0; i < HW; ++i) p[i] += a;
        }
}

inline Tensor sum_spatial(const Tensor& g) {
    int N = g.dim(0), C = g.dim(1), HW = g.dim(2) * g.dim(3);
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = g.data() + g.idx4(n, c, 0, 0);
            double s = 0;
            for (int i = 0; i < HW; ++i) s += p[i];
            out.v[static_cast<size_t>(n) * C + c] = static_cast<float>(s);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Adam. Dense slots update every element each step; sparse slots update only
// touched elements and keep independent per-element step counts, which keeps
// per-timestep quantizer entries isolated from each other. Frozen elements
// (monotone mask) are skipped entirely, state included.
// ---------------------------------------------------------------------------
struct Adam {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    struct Slot {
        float* w = nullptr;
        float* g = nullptr;
        int64_t n = 0;
        double lr = 0;
        const uint8_t* frozen = nullptr;       // nullable, monotone
        const uint8_t* touched = nullptr;      // nullable => dense
        std::vector<float> m, v;
        std::vector<int32_t> t;                // per-element for sparse, t[0] for dense
    };
    std::vector<Slot> slots;

    void add_dense(float* w, float* g, int64_t n, double lr, const uint8_t* frozen = nullptr) {
        Slot s;
        s.w = w;
        s.g = g;
        s.n = n;
        s.lr = lr;
        s.frozen = frozen;
        s.m.assign(static_cast<size_t>(n), 0.0f);
        s.v.assign(static_cast<size_t>(n), 0.0f);
        s.t.assign(1, 0);
        slots.push_back(std::move(s));
    }

    void add_sparse(float* w, float* g, int64_t n, double lr, const uint8_t* touched) {
        Slot s;
        s.w = w;
        s.g = g;
        s.n = n;
        s.lr = lr;
        s.touched = touched;
        s.m.assign(static_cast<size_t>(n), 0.0f);
        s.v.assign(static_cast<size_t>(n), 0.0f);
        s.t.assign(static_cast<size_t>(n), 0);
        slots.push_back(std::move(s));
    }

    void step() {
        for (auto& s : slots) {
            if (s.lr == 0.0) continue;
            if (!s.touched) ++s.t[0];
            for (int64_t i = 0; i < s.n; ++i) {
                if (s.frozen && s.frozen[i]) continue;
                if (s.touched && !s.touched[i]) continue;
                int32_t ti = s.touched ? ++s.t[static_cast<size_t>(i)] : s.t[0];
                float gi = s.g[i];
                s.m[static_cast<size_t>(i)] = static_cast<float>(beta1 * s.m[static_cast<size_t>(i)] + (1 - beta1) * gi);
                s.v[static_cast<size_t>(i)] = static_cast<float>(beta2 * s.v[static_cast<size_t>(i)] + (1 - beta2) * static_cast<double>(gi) * gi);
                double mhat = s.m[static_cast<size_t>(i)] / (1 - std::pow(beta1, ti));
                double vhat = s.v[static_cast<size_t>(i)] / (1 - std::pow(beta2, ti));
                s.w[i] -= static_cast<float>(s.lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
};

}  // namespace dq

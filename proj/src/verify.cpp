#include "dusss/verify.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include "dusss/contrastive.hpp"
#include "dusss/gradcheck.hpp"
#include "dusss/models.hpp"
#include "dusss/rng.hpp"
#include "dusss/semiseg.hpp"
#include "dusss/uncertainty.hpp"

namespace dusss {

namespace {

// Uniform values in [lo, hi] that stay at least `gap` away from every point
// in `avoid`, so piecewise ops are not probed across a kink.
Tensor rnd(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0, bool grad = true,
           std::vector<double> avoid = {}, double gap = 0.0) {
  std::vector<double> v(numel_of(shape));
  for (double& x : v) {
    for (;;) {
      x = uniform(rng, lo, hi);
      bool ok = true;
      for (double a : avoid) ok = ok && std::abs(x - a) >= gap;
      if (ok) break;
    }
  }
  return Tensor::from(shape, std::move(v), grad);
}

// Contracts any output with fixed random weights to give a scalar.
Tensor contract(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

struct Case {
  ScalarFn fn;
  std::vector<Tensor> inputs;
};

using CaseMaker = std::function<Case(Rng&)>;

struct Check {
  std::string name;
  std::function<CheckResult(const VerifyOptions&)> run;
};

Check grad_check(const std::string& name, CaseMaker make, std::size_t min_points = 0) {
  return {name, [name, make, min_points](const VerifyOptions& o) {
            Rng rng = make_rng(o.seed, name);
            double worst = 0.0;
            std::size_t coords = 0;
            const std::size_t points = std::max(o.points, min_points);
            for (std::size_t p = 0; p < points; ++p) {
              Case c = make(rng);
              GradcheckResult r = gradcheck(c.fn, c.inputs);
              worst = std::max(worst, r.max_error);
              coords += r.checked;
            }
            CheckResult res;
            res.name = name;
            res.passed = worst <= o.grad_tol && coords > 0;
            std::ostringstream os;
            os << "max rel err " << std::scientific << std::setprecision(2) << worst << " over "
               << coords << " coords, " << points << " points";
            res.detail = os.str();
            return res;
          }};
}

// Unary elementwise op contracted with random weights.
CaseMaker unary(std::function<Tensor(const Tensor&)> op, double lo = -1.0, double hi = 1.0,
                std::vector<double> avoid = {}, double gap = 0.0) {
  return [=](Rng& rng) {
    Tensor a = rnd(rng, {3, 4}, lo, hi, true, avoid, gap);
    Tensor w = rnd(rng, {3, 4}, -1, 1, false);
    return Case{[op, w](const std::vector<Tensor>& in) { return contract(op(in[0]), w); }, {a}};
  };
}

CaseMaker shaped(const Shape& in_shape, const Shape& out_shape,
                 std::function<Tensor(const Tensor&)> op, double lo = -1.0, double hi = 1.0) {
  return [=](Rng& rng) {
    Tensor a = rnd(rng, in_shape, lo, hi);
    Tensor w = rnd(rng, out_shape, -1, 1, false);
    return Case{[op, w](const std::vector<Tensor>& in) { return contract(op(in[0]), w); }, {a}};
  };
}

CaseMaker binary_case(const Shape& sa, const Shape& sb, const Shape& so,
                      std::function<Tensor(const Tensor&, const Tensor&)> op, double blo = -1.0,
                      double bhi = 1.0, std::vector<double> bavoid = {}, double bgap = 0.0) {
  return [=](Rng& rng) {
    Tensor a = rnd(rng, sa);
    Tensor b = rnd(rng, sb, blo, bhi, true, bavoid, bgap);
    Tensor w = rnd(rng, so, -1, 1, false);
    return Case{[op, w](const std::vector<Tensor>& in) { return contract(op(in[0], in[1]), w); },
                {a, b}};
  };
}

GaussianEmbedding gaussian_of(const Tensor& mu, const Tensor& log_var) {
  return {mu, exp(scale(log_var, 0.5)), log_var};
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_size = 8;
  c.patch = 4;
  c.d = 4;
  c.d_s = 3;
  c.d_u = 2;
  c.l_max = 5;
  c.vocab_size = 7;
  c.attn_heads = 2;
  c.ground_kernel = 3;
  c.seg_channels = 2;
  c.stem_channels = 2;
  return c;
}

// Moves zero-initialized biases off exact ReLU kinks.
void jitter(const NamedTensors& named, Rng& rng) {
  for (const auto& [n, t] : named)
    for (double& v : Tensor(t).mutable_data()) v += uniform(rng, -0.1, 0.1);
}

std::vector<Tensor> params_of(const NamedTensors& named) { return tensors_of(named); }

std::vector<Check> gradient_checks() {
  std::vector<Check> c;
  const std::vector<double> zero{0.0};
  c.push_back(grad_check("grad.op.add", binary_case({3, 4}, {1, 4}, {3, 4}, add)));
  c.push_back(grad_check("grad.op.sub", binary_case({2, 3, 4}, {3, 1}, {2, 3, 4}, sub)));
  c.push_back(grad_check("grad.op.mul", binary_case({3, 4}, {3, 1}, {3, 4}, mul)));
  c.push_back(grad_check("grad.op.div", binary_case({3, 4}, {1, 4}, {3, 4}, div, -2.0, 2.0, zero, 0.5)));
  c.push_back(grad_check("grad.op.affine", unary([](const Tensor& a) {
                           return neg(scale(add_scalar(a, 0.3), 1.7));
                         })));
  c.push_back(grad_check("grad.op.exp", unary([](const Tensor& a) { return exp(a); })));
  c.push_back(grad_check("grad.op.log", unary([](const Tensor& a) { return log(a); }, 0.2, 2.0)));
  c.push_back(grad_check("grad.op.sqrt", unary([](const Tensor& a) { return sqrt(a); }, 0.2, 2.0)));
  c.push_back(grad_check("grad.op.sigmoid", unary([](const Tensor& a) { return sigmoid(a); }, -3, 3)));
  c.push_back(grad_check("grad.op.relu", unary([](const Tensor& a) { return relu(a); }, -1, 1, zero, 0.05)));
  c.push_back(grad_check("grad.op.square", unary([](const Tensor& a) { return square(a); })));
  c.push_back(grad_check("grad.op.clamp", unary([](const Tensor& a) { return clamp(a, -0.5, 0.5); },
                                                -1, 1, {-0.5, 0.5}, 0.02)));
  c.push_back(grad_check("grad.op.clamp_min",
                         unary([](const Tensor& a) { return clamp_min(a, 0.1); }, -1, 1, {0.1}, 0.02)));
  c.push_back(grad_check("grad.op.matmul", binary_case({3, 4}, {4, 2}, {3, 2}, matmul)));
  c.push_back(grad_check("grad.op.bmm", binary_case({2, 3, 4}, {2, 4, 2}, {2, 3, 2}, bmm)));
  c.push_back(grad_check("grad.op.transpose", shaped({2, 3, 4}, {2, 4, 3}, [](const Tensor& a) {
                           return transpose(a);
                         })));
  c.push_back(grad_check("grad.op.sum", shaped({3, 4}, {1}, [](const Tensor& a) { return sum(a); })));
  c.push_back(grad_check("grad.op.sum_axis", shaped({2, 3, 4}, {2, 1, 4}, [](const Tensor& a) {
                           return sum(a, 1, true);
                         })));
  c.push_back(grad_check("grad.op.mean", shaped({3, 4}, {1}, [](const Tensor& a) { return mean(a); })));
  c.push_back(grad_check("grad.op.mean_axis", shaped({2, 3, 4}, {2, 3}, [](const Tensor& a) {
                           return mean(a, 2);
                         })));
  c.push_back(grad_check("grad.op.l2_norm", shaped({3, 4}, {1}, [](const Tensor& a) { return l2_norm(a); })));
  c.push_back(grad_check("grad.op.l2_norm_axis", shaped({3, 4}, {3}, [](const Tensor& a) {
                           return l2_norm(a, 1);
                         })));
  c.push_back(grad_check("grad.op.logsumexp", shaped({3, 4}, {1}, [](const Tensor& a) {
                           return logsumexp(a);
                         }, -3, 3)));
  c.push_back(grad_check("grad.op.logsumexp_axis", shaped({3, 4}, {3, 1}, [](const Tensor& a) {
                           return logsumexp(a, 1, true);
                         }, -3, 3)));
  c.push_back(grad_check("grad.op.max", shaped({3, 4}, {1}, [](const Tensor& a) { return max(a); })));
  c.push_back(grad_check("grad.op.max_axis", shaped({3, 4}, {4}, [](const Tensor& a) {
                           return max(a, 0);
                         })));
  c.push_back(grad_check("grad.op.softmax", shaped({3, 4}, {3, 4}, [](const Tensor& a) {
                           return softmax(a, 1);
                         }, -2, 2)));
  c.push_back(grad_check("grad.op.normalize", shaped({3, 4}, {3, 4}, [](const Tensor& a) {
                           return normalize(a, 1);
                         })));
  c.push_back(grad_check("grad.op.reshape", shaped({3, 4}, {2, 6}, [](const Tensor& a) {
                           return reshape(a, {2, 6});
                         })));
  c.push_back(grad_check("grad.op.concat", binary_case({2, 3}, {2, 2}, {2, 5}, [](const Tensor& a, const Tensor& b) {
                           return concat({a, b}, 1);
                         })));
  c.push_back(grad_check("grad.op.slice", shaped({3, 5}, {3, 2}, [](const Tensor& a) {
                           return slice(a, 1, 2, 2);
                         })));
  c.push_back(grad_check("grad.op.index_select", shaped({4, 3}, {5, 3}, [](const Tensor& a) {
                           const std::vector<std::size_t> idx{2, 0, 2, 3, 1};
                           return index_select(a, idx);
                         })));
  c.push_back(grad_check("grad.op.diagonal", shaped({4, 4}, {4}, [](const Tensor& a) {
                           return diagonal(a);
                         })));
  c.push_back(grad_check("grad.op.conv2d", [](Rng& rng) {
    Tensor x = rnd(rng, {2, 2, 5, 5});
    Tensor w = rnd(rng, {3, 2, 3, 3});
    Tensor b = rnd(rng, {3});
    Tensor out_w = rnd(rng, {2, 3, 3, 3}, -1, 1, false);
    return Case{[out_w](const std::vector<Tensor>& in) {
                  return contract(conv2d(in[0], in[1], in[2], 2, 1), out_w);
                },
                {x, w, b}};
  }));
  c.push_back(grad_check("grad.op.conv2d_valid", [](Rng& rng) {
    Tensor x = rnd(rng, {1, 2, 4, 4});
    Tensor w = rnd(rng, {2, 2, 2, 2});
    Tensor out_w = rnd(rng, {1, 2, 3, 3}, -1, 1, false);
    return Case{[out_w](const std::vector<Tensor>& in) {
                  return contract(conv2d(in[0], in[1], Tensor(), 1, 0), out_w);
                },
                {x, w}};
  }));
  c.push_back(grad_check("grad.op.upsample2x", shaped({1, 2, 3, 3}, {1, 2, 6, 6}, [](const Tensor& a) {
                           return upsample2x(a);
                         })));
  c.push_back(grad_check("grad.op.avg_pool2x", shaped({1, 2, 4, 4}, {1, 2, 2, 2}, [](const Tensor& a) {
                           return avg_pool2x(a);
                         })));
  c.push_back(grad_check("grad.op.bce", [](Rng& rng) {
    Tensor p = rnd(rng, {3, 4}, 0.05, 0.95);
    Tensor t = rnd(rng, {3, 4}, 0.0, 1.0);
    return Case{[](const std::vector<Tensor>& in) { return bce(in[0], in[1]); }, {p, t}};
  }));

  // Similarity supervision and the losses built on it.
  auto sss_case = [](std::function<Tensor(const PairwiseScores&)> pick) {
    return [pick](Rng& rng) {
      Tensor sa = rnd(rng, {4, 3}), sb = rnd(rng, {4, 3});
      Tensor ma = rnd(rng, {4, 2}), mb = rnd(rng, {4, 2});
      Tensor la = rnd(rng, {4, 2}), lb = rnd(rng, {4, 2});
      Tensor w = rnd(rng, {4, 4}, -1, 1, false);
      return Case{[pick, w](const std::vector<Tensor>& in) {
                    SSSConfig cfg{1.3, 0.2, 0.7};
                    PairwiseScores s = pairwise_scores(in[0], gaussian_of(in[2], in[4]), in[1],
                                                       gaussian_of(in[3], in[5]), cfg);
                    return contract(pick(s), w);
                  },
                  {sa, sb, ma, mb, la, lb}};
    };
  };
  c.push_back(grad_check("grad.loss.semantic_distance", sss_case([](const PairwiseScores& s) { return s.d_s; })));
  c.push_back(grad_check("grad.loss.wasserstein", sss_case([](const PairwiseScores& s) { return s.d_2w; })));
  c.push_back(grad_check("grad.loss.sim_hat", sss_case([](const PairwiseScores& s) { return s.sim_hat; })));
  c.push_back(grad_check("grad.loss.info_nce", [](Rng& rng) {
    Tensor s = rnd(rng, {4, 4});
    Tensor lt = Tensor::scalar(uniform(rng, std::log(0.1), std::log(1.0)), true);
    return Case{[](const std::vector<Tensor>& in) { return info_nce(in[0], exp(in[1])); }, {s, lt}};
  }));
  c.push_back(grad_check("grad.loss.cmc", [](Rng& rng) {
    Tensor a = rnd(rng, {3, 3}), b = rnd(rng, {3, 3});
    Tensor lt = Tensor::scalar(uniform(rng, std::log(0.1), std::log(1.0)), true);
    return Case{[](const std::vector<Tensor>& in) {
                  return cmc_loss(in[0], in[1], Temperature{in[2]}.tau());
                },
                {a, b, lt}};
  }));
  c.push_back(grad_check("grad.loss.imc", [](Rng& rng) {
    Tensor a = rnd(rng, {3, 3}), b = rnd(rng, {3, 3});
    Tensor lt = Tensor::scalar(uniform(rng, std::log(0.1), std::log(1.0)), true);
    return Case{[](const std::vector<Tensor>& in) {
                  return imc_loss(in[0], in[1], Temperature{in[2]}.tau());
                },
                {a, b, lt}};
  }));
  c.push_back(grad_check("grad.loss.sss_contrastive", [](Rng& rng) {
    Tensor si = rnd(rng, {3, 4}), st = rnd(rng, {3, 4});
    Tensor mi = rnd(rng, {3, 2}), mt = rnd(rng, {3, 2});
    Tensor li = rnd(rng, {3, 2}), lt = rnd(rng, {3, 2});
    Tensor tau = Tensor::scalar(uniform(rng, std::log(0.1), std::log(1.0)), true);
    return Case{[](const std::vector<Tensor>& in) {
                  PairwiseScores s = pairwise_scores(in[0], gaussian_of(in[2], in[4]), in[1],
                                                     gaussian_of(in[3], in[5]), SSSConfig{});
                  return cmc_loss(s.sim_hat, transpose(s.sim_hat), exp(in[6]));
                },
                {si, st, mi, mt, li, lt, tau}};
  }));
  c.push_back(grad_check("grad.loss.text_mask", [](Rng& rng) {
    Tensor v = rnd(rng, {2, 3, 2, 2}), t = rnd(rng, {2, 3});
    Tensor w = rnd(rng, {2, 2, 2}, -1, 1, false);
    return Case{[w](const std::vector<Tensor>& in) { return contract(text_mask(in[0], in[1]), w); },
                {v, t}};
  }));
  c.push_back(grad_check("grad.loss.tg", [](Rng& rng) {
    Tensor v = rnd(rng, {3, 4, 2, 2}), t = rnd(rng, {3, 4});
    Tensor lt = Tensor::scalar(uniform(rng, std::log(0.1), std::log(1.0)), true);
    return Case{[](const std::vector<Tensor>& in) {
                  Tensor pooled = mask_pool(in[0], text_mask(in[0], in[1]));
                  return tg_loss(pooled, in[1], exp(in[2]));
                },
                {v, t, lt}};
  }));
  c.push_back(grad_check("grad.loss.sup", [](Rng& rng) {
    Tensor logits = rnd(rng, {2, 3, 3}, -3, 3);
    std::vector<double> gt(18);
    for (double& g : gt) g = bernoulli(rng, 0.5) ? 1.0 : 0.0;
    Tensor y = Tensor::from({2, 3, 3}, gt);
    return Case{[y](const std::vector<Tensor>& in) { return sup_loss(sigmoid(in[0]), y); }, {logits}};
  }));
  c.push_back(grad_check("grad.loss.merge_pseudo", binary_case({2, 3}, {2, 3}, {2, 3}, merge_pseudo, 0, 1)));
  c.push_back(grad_check("grad.loss.semi", [](Rng& rng) {
    Tensor logits = rnd(rng, {2, 3, 3}, -3, 3);
    Tensor y_t = rnd(rng, {2, 3, 3}, 0, 1, false), y_text = rnd(rng, {2, 3, 3}, 0, 1, false);
    return Case{[y_t, y_text](const std::vector<Tensor>& in) {
                  return semi_losses(sigmoid(in[0]), merge_pseudo(y_t, y_text), y_text).semi;
                },
                {logits}};
  }));

  // Model paths on a tiny configuration.
  c.push_back(grad_check("grad.model.gaussian_chain", [](Rng& rng) {
    ModelConfig cfg = tiny_config();
    auto enc = std::make_shared<ImageEncoder>(cfg, rng);
    auto head = std::make_shared<GaussianHead>(cfg.d, cfg.d_u, rng);
    NamedTensors named;
    enc->collect("e", named);
    head->collect("h", named);
    jitter(named, rng);
    Tensor images = rnd(rng, {2, 1, 8, 8}, 0, 1, false);
    return Case{[enc, head, images](const std::vector<Tensor>&) {
                  ImageFeatures f = enc->encode(images);
                  GaussianEmbedding g = (*head)(f.cls);
                  PairwiseScores s = pairwise_scores(f.semantic, g, f.semantic, g, SSSConfig{});
                  return sum(s.d_2w);
                },
                params_of(named)};
  }, 20));
  c.push_back(grad_check("grad.model.text_encoder", [](Rng& rng) {
    ModelConfig cfg = tiny_config();
    auto enc = std::make_shared<TextEncoder>(cfg, rng);
    NamedTensors named;
    enc->collect("t", named);
    TokenBatch tb{{1, 3, 4, 0, 0, 1, 5, 6, 2, 0}, 2, 5};
    Tensor w1 = rnd(rng, {2, cfg.d_s}, -1, 1, false), w2 = rnd(rng, {2, cfg.d}, -1, 1, false);
    return Case{[enc, tb, w1, w2](const std::vector<Tensor>&) {
                  TextFeatures f = enc->encode(tb);
                  return add(contract(f.semantic, w1), contract(f.pooled, w2));
                },
                params_of(named)};
  }));
  c.push_back(grad_check("grad.model.grounding", [](Rng& rng) {
    ModelConfig cfg = tiny_config();
    auto dec = std::make_shared<GroundingDecoder>(cfg, rng);
    NamedTensors named;
    dec->collect("g", named);
    jitter(named, rng);
    Tensor grid = rnd(rng, {1, cfg.d, 2, 2});
    Tensor w = rnd(rng, {1, cfg.d, 8, 8}, -1, 1, false);
    std::vector<Tensor> inputs = params_of(named);
    inputs.push_back(grid);
    return Case{[dec, w](const std::vector<Tensor>& in) { return contract((*dec)(in.back()), w); },
                inputs};
  }));
  c.push_back(grad_check("grad.model.segnet", [](Rng& rng) {
    ModelConfig cfg = tiny_config();
    auto net = std::make_shared<SegNetwork>(cfg, rng);
    jitter(net->named_parameters(), rng);
    Tensor img = rnd(rng, {1, 1, 8, 8}, 0, 1);
    Tensor w = rnd(rng, {1, 8, 8}, -1, 1, false);
    std::vector<Tensor> inputs = params_of(net->named_parameters());
    inputs.push_back(img);
    return Case{[net, w](const std::vector<Tensor>& in) {
                  return contract(net->forward(in.back()), w);
                },
                inputs};
  }));
  return c;
}

Check exact_check(const std::string& name,
                  std::function<double(Rng&)> worst_error) {
  return {name, [name, worst_error](const VerifyOptions& o) {
            Rng rng = make_rng(o.seed, name);
            const double err = worst_error(rng);
            CheckResult r;
            r.name = name;
            r.passed = err <= o.exact_tol;
            std::ostringstream os;
            os << "max abs err " << std::scientific << std::setprecision(2) << err;
            r.detail = os.str();
            return r;
          }};
}

std::vector<Check> identity_checks() {
  std::vector<Check> c;
  c.push_back(exact_check("identity.wasserstein_self_zero", [](Rng& rng) {
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      DiagGaussian g;
      for (int i = 0; i < 8; ++i) {
        g.mu.push_back(uniform(rng, -3, 3));
        g.sigma.push_back(uniform(rng, 0.1, 3));
      }
      worst = std::max(worst, std::abs(wasserstein2_sq(g, g)));
    }
    return worst;
  }));
  c.push_back(exact_check("identity.sss_unit_at_zero", [](Rng& rng) {
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      SSSConfig cfg{uniform(rng, 0.1, 3), 0.0, uniform(rng, 0.1, 3)};
      const double rel = relative_uncertainty(uncertainty_level(0.0, cfg), uniform(rng, 0.1, 5));
      worst = std::max(worst, std::abs(sss_factor(rel, cfg) - 1.0));
    }
    return worst;
  }));
  c.push_back(exact_check("identity.sim_hat_fixed_points", [](Rng& rng) {
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
      const double sim = uniform(rng, -1, 1), d = uniform(rng, 1e-3, 1);
      worst = std::max(worst, std::abs(uncertain_sim(sim, 1.0) - sim));
      worst = std::max(worst, std::abs(uncertain_sim(1.0, d) - 1.0));
    }
    return worst;
  }));
  c.push_back(exact_check("identity.info_nce_uniform", [](Rng& rng) {
    double worst = 0.0;
    for (std::size_t n : {2, 4, 8}) {
      const double v = uniform(rng, -1, 1);
      Tensor s = Tensor::full({n, n}, v);
      Tensor tau = Tensor::scalar(uniform(rng, 0.05, 1.0));
      worst = std::max(worst, std::abs(info_nce(s, tau).item() - std::log(static_cast<double>(n))));
    }
    return worst;
  }));
  c.push_back(exact_check("identity.cmc_recomposition", [](Rng& rng) {
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      Tensor a = rnd(rng, {5, 5}, -1, 1, false), b = rnd(rng, {5, 5}, -1, 1, false);
      Tensor tau = Tensor::scalar(0.07);
      const double whole = cmc_loss(a, b, tau).item();
      const double parts = 0.5 * (info_nce(a, tau).item() + info_nce(b, tau).item());
      worst = std::max(worst, std::abs(whole - parts));
    }
    return worst;
  }));
  c.push_back(exact_check("identity.semi_recomposition", [](Rng& rng) {
    double worst = 0.0;
    for (int t = 0; t < 10; ++t) {
      Tensor ys = rnd(rng, {2, 4, 4}, 0.01, 0.99, false);
      Tensor yt = rnd(rng, {2, 4, 4}, 0, 1, false), ytext = rnd(rng, {2, 4, 4}, 0, 1, false);
      SemiLossTerms l = semi_losses(ys, merge_pseudo(yt, ytext), ytext);
      worst = std::max(worst, std::abs(l.semi.item() - 0.5 * (l.merged.item() + l.text.item())));
    }
    return worst;
  }));
  c.push_back(exact_check("identity.ema_endpoints", [](Rng& rng) {
    double worst = 0.0;
    for (double alpha : {0.0, 1.0}) {
      Tensor t = rnd(rng, {3, 3}, -1, 1, false), s = rnd(rng, {3, 3}, -1, 1, false);
      std::vector<double> before(t.data().begin(), t.data().end());
      ema_update({{"p", t}}, {{"p", s}}, alpha);
      for (std::size_t i = 0; i < before.size(); ++i) {
        const double expect = alpha == 0.0 ? s[i] : before[i];
        worst = std::max(worst, std::abs(t[i] - expect));
      }
    }
    return worst;
  }));
  c.push_back(exact_check("identity.pairwise_scalar_path", [](Rng& rng) {
    const std::size_t n = 8;
    Tensor sa = rnd(rng, {n, 4}, -1, 1, false), sb = rnd(rng, {n, 4}, -1, 1, false);
    Tensor ma = rnd(rng, {n, 3}, -1, 1, false), mb = rnd(rng, {n, 3}, -1, 1, false);
    Tensor la = rnd(rng, {n, 3}, -1, 1, false), lb = rnd(rng, {n, 3}, -1, 1, false);
    SSSConfig cfg{1.5, 0.1, 0.8};
    GaussianEmbedding ga = gaussian_of(ma, la), gb = gaussian_of(mb, lb);
    PairwiseScores s = pairwise_scores(sa, ga, sb, gb, cfg);
    double worst = 0.0;
    for (int t = 0; t < 5; ++t) {
      const std::size_t i = uniform_index(rng, n), j = uniform_index(rng, n);
      auto row = [](const Tensor& m, std::size_t r) {
        const std::size_t w = m.dim(1);
        return std::vector<double>(m.data().begin() + static_cast<long>(r * w),
                                   m.data().begin() + static_cast<long>((r + 1) * w));
      };
      DiagGaussian gi{row(ga.mu, i), row(ga.sigma, i)}, gj{row(gb.mu, j), row(gb.sigma, j)};
      const double d_s = semantic_distance(row(sa, i), row(sb, j));
      const double d_sss = sss_factor(
          relative_uncertainty(uncertainty_level(wasserstein2_sq(gi, gj), cfg), d_s), cfg);
      const double expect = uncertain_sim(cosine_similarity(row(sa, i), row(sb, j)), d_sss);
      worst = std::max(worst, std::abs(s.sim_hat[i * n + j] - expect));
    }
    return worst;
  }));
  return c;
}

}  // namespace

CheckResult check_monotonicity(std::size_t trials, std::uint64_t seed, const SimHatFn& sim_hat) {
  Rng rng = make_rng(seed, "monotonicity");
  const SSSConfig cfg;
  std::size_t violations = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const double sim = uniform(rng, -1.0, 0.999);
    const double d_s = uniform(rng, 0.5, 5.0);
    const double d_u = uniform(rng, 0.0, 5.0);
    const double d_u2 = d_u + uniform(rng, 0.01, 1.0);
    const double lo = sim_hat(sim, sss_factor(relative_uncertainty(d_u, d_s), cfg));
    const double hi = sim_hat(sim, sss_factor(relative_uncertainty(d_u2, d_s), cfg));
    if (!(hi > lo)) ++violations;
  }
  CheckResult r;
  r.name = "monotonicity.sim_hat_in_d_u";
  r.passed = violations == 0;
  r.detail = std::to_string(violations) + " violations in " + std::to_string(trials) + " triples";
  return r;
}

namespace {

std::vector<Check> all_checks() {
  std::vector<Check> c = gradient_checks();
  for (auto& x : identity_checks()) c.push_back(std::move(x));
  c.push_back({"monotonicity.sim_hat_in_d_u", [](const VerifyOptions& o) {
                 return check_monotonicity(o.trials, o.seed, o.sim_hat ? o.sim_hat : uncertain_sim);
               }});
  return c;
}

}  // namespace

std::vector<std::string> verify_check_names() {
  std::vector<std::string> out;
  for (const auto& c : all_checks()) out.push_back(c.name);
  return out;
}

std::vector<CheckResult> run_verify(const VerifyOptions& options) {
  std::vector<CheckResult> out;
  for (const auto& c : all_checks()) {
    if (!options.filter.empty() && c.name.find(options.filter) == std::string::npos) continue;
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
      r = c.run(options);
    } catch (const std::exception& e) {
      r.name = c.name;
      r.passed = false;
      r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

void print_verify_table(std::ostream& os, const std::vector<CheckResult>& results) {
  std::size_t width = 5;
  for (const auto& r : results) width = std::max(width, r.name.size());
  std::size_t failed = 0;
  char buf[64];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%7.3fs", r.seconds);
    os << (r.passed ? "PASS  " : "FAIL  ") << std::left << std::setw(static_cast<int>(width))
       << r.name << "  " << buf << "  " << r.detail << '\n';
    if (!r.passed) ++failed;
  }
  os << results.size() - failed << "/" << results.size() << " checks passed\n";
}

}  // namespace dusss

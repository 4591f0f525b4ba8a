// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   acceptance --checkpoint MODEL --cli TINYLAYOUT --work DIR [--only 1,2,...]
//   acceptance --prepare ...   trains MODEL through the CLI if it does not exist yet

#include <algorithm>
#include <chrono>
#include <cstdarg>
#include <cstring>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "tinylayout/checkpoint.hpp"
#include "tinylayout/dataset.hpp"
#include "tinylayout/editing.hpp"
#include "tinylayout/eval.hpp"
#include "tinylayout/experiments.hpp"
#include "tinylayout/guidance.hpp"

namespace fs = std::filesystem;
using namespace tinylayout;
using Clock = std::chrono::steady_clock;

namespace {

// Recipe for the trained model the data-driven criteria run on.
constexpr std::size_t kScenes = 5000;
constexpr std::uint64_t kDataSeed = 1;
constexpr std::size_t kTrainSteps = 15000;
constexpr std::size_t kBatch = 16;
constexpr std::uint64_t kTrainSeed = 1;

// Sample counts; --quick divides them by 10 for pilots, which report INFO instead of a verdict.
std::size_t kVisorPrompts = 200;
std::size_t kLocalizationTrials = 100;
std::size_t kEotSeeds = 50;
std::size_t kEditSeeds = 50;
std::size_t kRegressionPrompts = 100;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path checkpoint, cli, work;
  std::optional<Checkpoint> ck;
  std::optional<Model> model;
  NoiseSchedule schedule;

  const Model& trained() {
    if (!model) {
      ck = load_checkpoint(checkpoint);
      model.emplace(ck->model());
      schedule = ck->schedule();
    }
    return *model;
  }
};

// Shared by criteria 6, 7 and 8.
struct VisorSweep {
  std::map<GuidanceMode, MetricsReport> reports;
  std::map<GuidanceMode, double> mean_seconds;
  std::vector<double> inbox_none, inbox_backward;
};

// ---- 1-5: equation and metric oracles --------------------------------------------------

Verdict forward_bias_suite() {
  const auto start = Clock::now();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_mass = 0.0, worst_identity = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t cells = 1 + rng() % 64, n = 2 + rng() % 15;
    std::vector<double> a(cells * n), g(cells);
    for (auto& x : a) x = u(rng);
    double gs = 0.0;
    for (auto& x : g) gs += (x = u(rng));
    for (auto& x : g) x /= gs;
    std::vector<std::size_t> tokens;
    for (std::size_t i = 0; i < n; ++i)
      if (rng() % 2) tokens.push_back(i);
    if (tokens.empty()) tokens.push_back(0);
    const Tensor A({cells, n}, a), G({cells}, g);
    const Tensor out = forward_bias(A, tokens, G, u(rng));
    for (auto i : tokens) {
      double before = 0.0, after = 0.0;
      for (std::size_t c = 0; c < cells; ++c) before += A.at(c * n + i), after += out.at(c * n + i);
      worst_mass = std::max(worst_mass, std::abs(before - after));
    }
    const Tensor same = forward_bias(A, tokens, G, 0.0);
    for (std::size_t k = 0; k < A.size(); ++k) worst_identity = std::max(worst_identity, std::abs(same.at(k) - A.at(k)));
  }
  const std::vector<std::size_t> one{1};
  const Tensor ex = forward_bias(Tensor({2, 2}, std::vector<double>{0.6, 0.4, 0.2, 0.8}), one,
                                 Tensor({2}, std::vector<double>{1.0, 0.0}), 1.0);
  const std::vector<double> expect{0.6, 1.2, 0.2, 0.0};
  double worst_example = 0.0;
  for (std::size_t k = 0; k < 4; ++k) worst_example = std::max(worst_example, std::abs(ex.at(k) - expect[k]));
  const double t = seconds_since(start);
  return {worst_mass <= 1e-12 && worst_identity == 0.0 && worst_example <= 1e-15 && t < 1.0,
          fmt("mass err %.1e, lambda=0 err %.1e, 2x2 relocation err %.1e, %.3f s", worst_mass, worst_identity,
              worst_example, t)};
}

Verdict energy_suite() {
  const Tensor A({4, 1}, std::vector<double>{0.1, 0.2, 0.3, 0.4});
  const std::vector<std::size_t> all{0, 1, 2, 3}, back{2, 3};
  const double e0 = layout_energy(A, all, 0).item(), e09 = layout_energy(A, back, 0).item();
  const Tensor B({4, 1}, std::vector<double>{0.0, 0.0, 0.5, 0.5});
  const std::vector<std::size_t> front{0, 1};
  const double e1 = layout_energy(B, front, 0).item();
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t outside = 0;
  for (int k = 0; k < 1000; ++k) {
    const std::size_t cells = 1 + rng() % 64;
    std::vector<double> col(cells);
    for (auto& x : col) x = u(rng);
    std::vector<std::size_t> mask;
    for (std::size_t c = 0; c < cells; ++c)
      if (rng() % 2) mask.push_back(c);
    const double e = layout_energy(Tensor({cells, 1}, col), mask, 0).item();
    outside += !(e >= 0.0 && e <= 1.0);
  }
  const bool ok = std::abs(e0) <= 1e-12 && std::abs(e1 - 1.0) <= 1e-12 && std::abs(e09 - 0.09) <= 1e-12 && outside == 0;
  return {ok, fmt("E(all in)=%.2e, E(none in)=1%+.1e, E(0.7 in)=0.09%+.1e, %zu/1000 outside [0,1]", e0, e1 - 1.0,
                  e09 - 0.09, outside)};
}

Verdict gradient_oracle() {
  const auto start = Clock::now();
  const auto schedule = build_schedule();
  const auto times = inference_timesteps(schedule, 50);
  const std::vector<LayerId> gamma{LayerId::Mid1, LayerId::Up1};
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    std::mt19937_64 rng(1000 + trial);
    Model model(ModelConfig{}, 50 + trial);
    const ObjectClass a = ObjectClass::from_index(rng() % kNumClasses), b = ObjectClass::from_index(rng() % kNumClasses);
    const Relation rel = kRelations[rng() % 4];
    const auto tokens = model.tokenize(two_object_prompt(a, rel, b));
    Tensor context;
    {
      GradTape::Pause p;
      context = model.encode_text(tokens);
    }
    VisorPrompt vp;
    vp.subject = a;
    vp.object = b;
    vp.relation = rel;
    LayoutSpec layout = visor_layout(vp, tokens);
    std::uniform_real_distribution<double> u(0.0, 0.5), s(0.2, 0.5);
    for (auto& target : layout) {
      const double x = u(rng), y = u(rng);
      target.box = BBox{x, y, x + s(rng), y + s(rng)};
    }
    if (trial % 2) layout.resize(1);
    const auto targets = resolve_layout(layout, tokens);
    const int t = times[rng() % times.size()];
    const Tensor z = initial_latent(model.config(), 900 + trial);
    auto f = [&](const Tensor& x) {
      DenoiseOptions o;
      o.stop_after = LayerId::Up1;
      return total_energy(model.denoise(x, t, context, o).records, targets, gamma);
    };
    // Analytic gradient first, to add its largest coordinates to the random ones.
    std::vector<double> grad;
    {
      Tensor leaf = z.clone();
      leaf.set_requires_grad(true);
      GradTape tape;
      Tensor e;
      {
        auto rec = tape.record();
        e = f(leaf);
      }
      auto g = tape.backward(e)[leaf].values();
      grad.assign(g.begin(), g.end());
    }
    std::vector<std::size_t> order(grad.size());
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + 8, order.end(),
                      [&](std::size_t a, std::size_t b) { return std::abs(grad[a]) > std::abs(grad[b]); });
    std::set<std::size_t> coords(order.begin(), order.begin() + 8);
    while (coords.size() < 24) coords.insert(rng() % grad.size());
    const std::vector<std::size_t> cv(coords.begin(), coords.end());
    const auto rep = finite_difference_check(f, z, 1e-5, cv);
    worst = std::max(worst, rep.non_finite_at ? 1.0 : rep.max_rel_error);
    checked += rep.checked;
  }
  const double secs = seconds_since(start);
  return {worst < 1e-6 && secs < 120.0, fmt("max rel err %.2e over 20 triples (%zu coords), %.1f s", worst, checked, secs)};
}

Verdict schedule_suite() {
  const auto s = build_schedule();
  const bool betas = s.betas.front() == 0.00085 && s.betas.back() == 0.012 && s.T == 500;
  const double sig = NoiseSchedule::sigma_from_alpha_bar(0.5);
  const Tensor un({3, 2, 2}, std::vector<double>{1, -2, 3, 4, 0.5, -6, 7, 8, 9, -1, 2, 3});
  const Tensor co({3, 2, 2}, std::vector<double>{0.1, 2, -3, 4.5, 5, 6, 7.25, -8, 9, 10, 11, 12});
  const Tensor w0 = cfg_combine(un, co, 0.0), w1 = cfg_combine(un, co, 1.0);
  bool cfg = true;
  for (std::size_t k = 0; k < un.size(); ++k) cfg = cfg && w0.at(k) == un.at(k) && w1.at(k) == co.at(k);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  for (int t : {1, 100, 250, 500}) {
    std::vector<double> z0(100000), eps(100000);
    for (auto& x : z0) x = n(rng);
    for (auto& x : eps) x = n(rng);
    const Tensor zt = q_sample(Tensor({100000}, z0), t, Tensor({100000}, eps), s);
    double m = 0.0, v = 0.0;
    for (double x : zt.values()) m += x;
    m /= 1e5;
    for (double x : zt.values()) v += (x - m) * (x - m);
    worst = std::max(worst, std::abs(v / 1e5 - 1.0));
  }
  return {betas && sig == 1.0 && cfg && worst <= 0.02,
          fmt("betas exact: %s, sigma(0.5)=%.17g, cfg identities: %s, q_sample var dev %.4f", betas ? "yes" : "no", sig,
              cfg ? "yes" : "no", worst)};
}

double brute_force_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<GroundTruth>>& gts,
                      const ObjectClass& cls, double thr) {
  std::vector<std::pair<std::size_t, Detection>> all;
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (const auto& d : dets[i])
      if (d.label == cls) all.emplace_back(i, d);
    for (const auto& g : gts[i]) n_gt += g.label == cls;
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.second.score > b.second.score; });
  std::vector<double> p, r;
  for (std::size_t k = 1; k <= all.size(); ++k) {
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
    std::size_t tp = 0;
    for (std::size_t j = 0; j < k; ++j) {
      const auto& [img, d] = all[j];
      double best = -1.0;
      std::size_t arg = 0;
      for (std::size_t g = 0; g < gts[img].size(); ++g) {
        if (used[img][g] || !(gts[img][g].label == cls)) continue;
        const double v = iou(d.box, gts[img][g].box);
        if (v >= thr && v > best) best = v, arg = g;
      }
      if (best >= 0.0) used[img][arg] = true, ++tp;
    }
    p.push_back(static_cast<double>(tp) / k);
    r.push_back(static_cast<double>(tp) / n_gt);
  }
  double ap = 0.0, prev = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    ap += (r[k] - prev) * *std::max_element(p.begin() + k, p.end());
    prev = r[k];
  }
  return ap;
}

Verdict metric_oracles() {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(0.0, 0.6), side(0.2, 0.4);
  auto box = [&] {
    const double x = pos(rng), y = pos(rng);
    return BBox{x, y, x + side(rng), y + side(rng)};
  };
  const std::vector<ObjectClass> classes{{ShapeKind::Square, Color::Red}, {ShapeKind::Circle, Color::Blue}};
  std::size_t ap_mismatch = 0, instances = 0;
  for (int trial = 0; trial < 5000; ++trial) {
    const std::size_t images = 1 + rng() % 2;
    std::vector<std::vector<Detection>> dets(images);
    std::vector<std::vector<GroundTruth>> gts(images);
    std::vector<double> scores{0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85};
    std::shuffle(scores.begin(), scores.end(), rng);
    const std::size_t ng = 1 + rng() % 4, nd = rng() % 5;
    for (std::size_t k = 0; k < ng; ++k) gts[rng() % images].push_back({classes[rng() % 2], box()});
    for (std::size_t k = 0; k < nd; ++k) {
      const std::size_t img = rng() % images;
      Detection d;
      d.label = classes[rng() % 2];
      d.box = (rng() % 2 && !gts[img].empty()) ? gts[img][rng() % gts[img].size()].box : box();
      d.score = scores[k];
      dets[img].push_back(d);
    }
    const auto r = average_precision(dets, gts, 0.3);
    for (const auto& c : classes) {
      if (!r.per_class.count(c.index())) continue;
      ++instances;
      ap_mismatch += r.per_class.at(c.index()) != brute_force_ap(dets, gts, c, 0.3);
    }
  }
  const bool iou_ok = iou(BBox{0.1, 0.2, 0.5, 0.6}, BBox{0.1, 0.2, 0.5, 0.6}) == 1.0 &&
                      iou(BBox{0, 0, 0.3, 0.3}, BBox{0.5, 0.5, 1, 1}) == 0.0 &&
                      iou(BBox{0, 0, 1, 0.5}, BBox{0, 0, 1, 1}) == 0.5;
  double worst_identity = 0.0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<VisorSample> samples(1 + rng() % 30);
    for (auto& s : samples) {
      s.subject = classes[0];
      s.object = classes[1];
      s.relation = kRelations[rng() % 4];
      for (const auto& c : classes)
        if (rng() % 4) {
          Detection d;
          d.label = c;
          d.box = box();
          d.score = 0.9;
          d.centroid_x = d.box.cx();
          d.centroid_y = d.box.cy();
          s.detections.push_back(d);
        }
    }
    const auto rep = visor_evaluate(samples);
    if (rep.visor_cond) worst_identity = std::max(worst_identity, std::abs(rep.visor_uncond - *rep.visor_cond * rep.object_accuracy));
  }
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruth>> gts;
  for (std::uint64_t i = 0; i < 1000; ++i) {
    const auto s = random_scene(99, i, GeneratorConfig{});
    dets.push_back(detect(render_scene(s)));
    std::vector<GroundTruth> g;
    for (const auto& o : s.objects) g.push_back({o.cls, o.box});
    gts.push_back(g);
  }
  const double map = average_precision(dets, gts, 0.3).map;
  return {ap_mismatch == 0 && iou_ok && worst_identity <= 1e-9 && map >= 0.99,
          fmt("AP mismatches %zu/%zu, IoU examples %s, visor identity err %.1e, detector mAP@0.3 %.4f", ap_mismatch,
              instances, iou_ok ? "exact" : "wrong", worst_identity, map)};
}

// ---- 6-8: split-canvas VISOR on the trained model ------------------------------------------

VisorSweep run_sweep(Context& ctx) {
  const Model& model = ctx.trained();
  const RunConfig rc;
  const auto prompts = visor_prompts(kVisorPrompts, 0, ctx.ck->held_out);
  const std::array<GuidanceMode, 3> modes{GuidanceMode::None, GuidanceMode::Forward, GuidanceMode::Backward};
  std::map<GuidanceMode, std::vector<VisorSample>> samples;
  VisorSweep sweep;
  const auto begin = Clock::now();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& p = prompts[i];
    const auto tokens = model.tokenize(p.prompt);
    const auto layout = visor_layout(p, tokens);
    const auto targets = resolve_layout(layout, tokens);
    for (GuidanceMode m : modes) {
      const auto start = Clock::now();
      auto result = generate(model, ctx.schedule, p.prompt, layout, m, rc, p.seed);
      sweep.mean_seconds[m] += seconds_since(start) / prompts.size();
      samples[m].push_back({detect(tensor_to_image(result.image)), p.subject, p.object, p.relation,
                            {{p.subject, p.subject_box}, {p.object, p.object_box}}});
      if (i < kLocalizationTrials && m != GuidanceMode::Forward) {
        const double v = in_box_attention(result.history, targets, rc.gamma_layers, rc.steps, 10);
        (m == GuidanceMode::None ? sweep.inbox_none : sweep.inbox_backward).push_back(v);
      }
    }
    if ((i + 1) % 20 == 0)
      std::cerr << "  visor sweep " << i + 1 << "/" << prompts.size() << " (" << seconds_since(begin) << " s)\n";
  }
  for (GuidanceMode m : modes) sweep.reports[m] = visor_evaluate(samples[m]);
  std::ofstream(ctx.work / "visor_sweep.json") << "{\"none\": " << report_json(sweep.reports[GuidanceMode::None])
                                               << ",\n\"forward\": " << report_json(sweep.reports[GuidanceMode::Forward])
                                               << ",\n\"backward\": " << report_json(sweep.reports[GuidanceMode::Backward])
                                               << "}\n";
  return sweep;
}

std::string pct(const std::optional<double>& v) { return v ? fmt("%.1f%%", 100.0 * *v) : std::string("undefined"); }

Verdict visor_direction(const VisorSweep& s) {
  const auto& none = s.reports.at(GuidanceMode::None);
  const auto& fwd = s.reports.at(GuidanceMode::Forward);
  const auto& bwd = s.reports.at(GuidanceMode::Backward);
  const bool defined = none.visor_cond && fwd.visor_cond && bwd.visor_cond;
  bool ok = false;
  if (defined) {
    ok = *bwd.visor_cond - *none.visor_cond >= 0.25 && *bwd.visor_cond >= 0.85 && *fwd.visor_cond - *none.visor_cond >= 0.15;
  }
  return {ok, fmt("VISOR_cond unguided %s, forward %s, backward %s (OA %.1f%% / %.1f%% / %.1f%%)", pct(none.visor_cond).c_str(),
                  pct(fwd.visor_cond).c_str(), pct(bwd.visor_cond).c_str(), 100 * none.object_accuracy,
                  100 * fwd.object_accuracy, 100 * bwd.object_accuracy)};
}

Verdict cost_ordering(const VisorSweep& s) {
  const double n = s.mean_seconds.at(GuidanceMode::None), f = s.mean_seconds.at(GuidanceMode::Forward),
               b = s.mean_seconds.at(GuidanceMode::Backward);
  return {n <= f && f <= b && b <= 3.0 * n, fmt("s/image unguided %.2f, forward %.2f, backward %.2f (%.2fx)", n, f, b, b / n)};
}

Verdict localization(const VisorSweep& s) {
  std::size_t wins = 0;
  for (std::size_t i = 0; i < s.inbox_none.size(); ++i) wins += s.inbox_backward[i] > s.inbox_none[i];
  const double mn = std::accumulate(s.inbox_none.begin(), s.inbox_none.end(), 0.0) / s.inbox_none.size();
  const double mb = std::accumulate(s.inbox_backward.begin(), s.inbox_backward.end(), 0.0) / s.inbox_backward.size();
  return {10 * wins >= 9 * s.inbox_none.size(), fmt("guided > unguided in %zu/%zu trials (mean in-box mass %.3f vs %.3f)", wins, s.inbox_none.size(), mb, mn)};
}

// ---- 9: padding-only guidance ---------------------------------------------------------

std::optional<Detection> foreground(const std::vector<Detection>& dets) {
  if (dets.empty()) return std::nullopt;
  return *std::max_element(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.area < b.area; });
}

Verdict padding_only(Context& ctx) {
  const Model& model = ctx.trained();
  const RunConfig rc;
  const std::array<BBox, 4> corners{BBox{0, 0, 0.5, 0.5}, BBox{0.5, 0, 1, 0.5}, BBox{0, 0.5, 0.5, 1}, BBox{0.5, 0.5, 1, 1}};
  std::vector<ObjectClass> classes;
  for (std::size_t c = 0; c < kNumClasses; ++c)
    if (!ctx.ck->held_out || !(ObjectClass::from_index(c) == *ctx.ck->held_out)) classes.push_back(ObjectClass::from_index(c));
  std::size_t guided = 0, plain = 0;
  for (std::size_t i = 0; i < kEotSeeds; ++i) {
    const std::string prompt = "a " + classes[i % classes.size()].name();
    const BBox box = corners[i % 4];
    const LayoutSpec layout{{TokenSelector::eot(), box}};
    const std::uint64_t seed = 5000 + i;
    auto inside = [&](GuidanceMode m) {
      auto fg = foreground(detect(tensor_to_image(generate(model, ctx.schedule, prompt, layout, m, rc, seed).image)));
      return fg && box.contains(fg->centroid_x, fg->centroid_y);
    };
    guided += inside(GuidanceMode::Backward);
    plain += inside(GuidanceMode::None);
  }
  const double g = static_cast<double>(guided) / kEotSeeds, p = static_cast<double>(plain) / kEotSeeds;
  return {g >= 0.70 && p <= 0.40, fmt("centroid in box: EOT-guided %zu/%zu, unguided %zu/%zu", guided, kEotSeeds, plain, kEotSeeds)};
}

// ---- 10: editing --------------------------------------------------------------------------

Verdict editing(Context& ctx) {
  Model model = ctx.trained().clone();
  const auto& schedule = ctx.schedule;
  const ObjectClass concept_class = ctx.ck->held_out.value_or(ObjectClass{ShapeKind::Triangle, Color::Yellow});
  std::vector<Image> images;
  std::mt19937_64 rng(0xc0ce97ull);
  for (int i = 0; i < 5; ++i) images.push_back(render_scene(random_scene_with(rng, 1, {concept_class}, GeneratorConfig{})));

  EditConfig ec;
  ec.init_words = {std::string(shape_name(concept_class.shape))};
  const Model base = model.clone();
  const std::size_t first_free = model.vocab().size();
  const auto before = frozen_checksum(model, first_free);
  const auto inv_start = Clock::now();
  auto token = invert_concept(model, images, ec, schedule);
  const double inv_secs = seconds_since(inv_start);
  const bool frozen = frozen_checksum(model, first_free) == before;

  const std::string prompt = ec.prompt();
  const RunConfig rc;
  auto has_concept = [&](const std::vector<Detection>& d) { return best_detection(d, concept_class); };
  std::size_t identity = 0;
  for (std::size_t i = 0; i < kEditSeeds; ++i) {
    auto img = tensor_to_image(sample(model, schedule, prompt, rc.sampler(7000 + i)).image);
    identity += has_concept(detect(img)).has_value();
  }

  const double loss_before = concept_loss(model, images, ec, schedule);
  Model tuned = finetune(model, images, token, ec, schedule);
  const double loss_after = concept_loss(tuned, images, ec, schedule);

  // Zeroed guidance reproduces plain sampling on the fine-tuned model.
  const auto tokens = tuned.tokenize(prompt);
  const std::size_t concept_index = tokens.word_end - 1;
  const LayoutSpec left{{TokenSelector::index(concept_index), BBox{0, 0, 0.5, 1}}};
  ForwardConfig f0 = rc.forward();
  f0.lambda = 0.0;
  BackwardConfig b0 = rc.backward();
  b0.eta = 0.0;
  const auto sc = rc.sampler(8000);
  const auto z = edit_layout(tuned, schedule, prompt, left, f0, b0, sc).image;
  const auto p = sample(tuned, schedule, prompt, sc).image;
  const bool exact = std::memcmp(z.values().data(), p.values().data(), z.size() * sizeof(double)) == 0;

  std::size_t placed = 0;
  for (std::size_t i = 0; i < kEditSeeds; ++i) {
    auto img = tensor_to_image(edit_layout(tuned, schedule, prompt, left, std::nullopt, rc.backward(), rc.sampler(9000 + i)).image);
    auto d = has_concept(detect(img));
    placed += d && d->centroid_x < 0.5;
  }

  // Base-vocabulary regression guard, unguided so that enough images contain both objects.
  const auto prompts = visor_prompts(kRegressionPrompts, 3, ctx.ck->held_out);
  const auto pre = run_visor(base, schedule, prompts, GuidanceMode::None, rc).report;
  const auto post = run_visor(tuned, schedule, prompts, GuidanceMode::None, rc).report;
  const double drift = pre.visor_cond && post.visor_cond ? std::abs(*pre.visor_cond - *post.visor_cond) : 1.0;

  const double id_rate = static_cast<double>(identity) / kEditSeeds, place_rate = static_cast<double>(placed) / kEditSeeds;
  const bool ok = frozen && exact && id_rate >= 0.60 && loss_after <= loss_before && place_rate >= 0.70 && drift <= 0.10;
  return {ok, fmt("frozen %s, zero guidance exact %s, identity %zu/%zu, placement %zu/%zu, loss %.4f -> %.4f, "
                  "unguided VISOR_cond %s -> %s, inversion %.0f s",
                  frozen ? "yes" : "no", exact ? "yes" : "no", identity, kEditSeeds, placed, kEditSeeds, loss_before,
                  loss_after, pct(pre.visor_cond).c_str(), pct(post.visor_cond).c_str(), inv_secs)};
}

// ---- 11: CLI determinism ------------------------------------------------------------------

int shell(const std::string& cmd) {
  const int status = std::system((cmd + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      std::ifstream in(e.path(), std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      out[fs::relative(e.path(), dir).string()] = ss.str();
    }
  return out;
}

Verdict cli_determinism(Context& ctx) {
  const fs::path root = ctx.work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string cli = ctx.cli.string(), ck = ctx.checkpoint.string();
  const std::string fast = " --steps 10 --backward-steps 3 --backward-repeats 2 --forward-steps 8";
  std::ofstream(root / "layout.json") << R"([{"token": "circle", "box": [0, 0, 0.5, 1]}])";
  std::ofstream(root / "concept.json") << R"([{"token": "<*>", "box": [0, 0, 0.5, 1]}])";
  const fs::path data = root / "data", concept_ckpt = root / "concept.ckpt";
  std::vector<std::pair<std::string, std::function<std::string(const fs::path&)>>> commands{
      {"make-data", [&](const fs::path& d) { return "make-data --n 20 --seed 4 --held-out 'yellow triangle' --out " + (d / "data").string(); }},
      {"train", [&](const fs::path& d) { return "train --data " + data.string() + " --steps 2 --batch-size 2 --out " + (d / "m.ckpt").string(); }},
      {"sample", [&](const fs::path& d) {
         return "sample --checkpoint " + ck + " --prompt 'a red circle to the left of a blue square' --mode both --layout " +
                (root / "layout.json").string() + " --out " + (d / "s.png").string() + " --dump-attn " + (d / "attn").string() + fast;
       }},
      {"eval-visor", [&](const fs::path& d) {
         return "eval-visor --checkpoint " + ck + " --n-prompts 3 --mode backward --compare --out " + (d / "r.json").string() +
                " --save-images " + (d / "img").string() + fast;
       }},
      {"ablate", [&](const fs::path& d) { return "ablate --checkpoint " + ck + " --sweep eta --n-prompts 1 --out " + (d / "a.csv").string() + fast; }},
      {"word-drop", [&](const fs::path& d) { return "word-drop --checkpoint " + ck + " --prompt 'a green square above a red circle' --out-dir " + d.string() + fast; }},
      {"invert", [&](const fs::path& d) { return "invert --checkpoint " + ck + " --steps 5 --out " + (d / "c.ckpt").string(); }},
      {"edit", [&](const fs::path& d) {
         return "edit --checkpoint " + concept_ckpt.string() + " --finetune-steps 3 --prompt 'a photo of a <*>' --layout " +
                (root / "concept.json").string() + " --out " + (d / "e.png").string() + " --save-finetuned " +
                (d / "ft.ckpt").string() + fast;
       }},
  };
  if (shell(cli + " make-data --n 20 --seed 4 --held-out 'yellow triangle' --out " + data.string()) != 0 ||
      shell(cli + " invert --checkpoint " + ck + " --steps 5 --out " + concept_ckpt.string()) != 0)
    return {false, "setup commands failed"};
  std::vector<std::string> bad;
  for (const auto& [name, cmd] : commands) {
    const fs::path a = root / (name + "_a"), b = root / (name + "_b");
    fs::create_directories(a);
    fs::create_directories(b);
    const int ra = shell(cli + " " + cmd(a)), rb = shell(cli + " " + cmd(b));
    if (ra != 0 || rb != 0 || tree(a).empty() || tree(a) != tree(b)) bad.push_back(name);
  }
  std::string detail = fmt("%zu/%zu commands byte-identical on rerun", commands.size() - bad.size(), commands.size());
  for (const auto& n : bad) detail += " [" + n + " differs or failed]";
  fs::remove_all(root);
  return {bad.empty(), detail};
}

// ---- driver ---------------------------------------------------------------------------

int prepare(const Context& ctx) {
  if (fs::exists(ctx.checkpoint)) {
    std::cout << "model ready: " << ctx.checkpoint.string() << '\n';
    return 0;
  }
  const fs::path data = ctx.work / "shapes5k";
  fs::create_directories(ctx.checkpoint.parent_path());
  const std::string cli = ctx.cli.string();
  if (!fs::exists(data / "train.jsonl") &&
      std::system((cli + " make-data --n " + std::to_string(kScenes) + " --seed " + std::to_string(kDataSeed) +
                   " --held-out 'yellow triangle' --out " + data.string()).c_str()) != 0)
    return 1;
  const std::string train = cli + " train --data " + data.string() + " --out " + ctx.checkpoint.string() + " --steps " +
                            std::to_string(kTrainSteps) + " --batch-size " + std::to_string(kBatch) + " --seed " +
                            std::to_string(kTrainSeed) + " --checkpoint-every 500";
  std::cout << train << '\n';
  return std::system(train.c_str()) == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string checkpoint, cli, work, only;
  bool do_prepare = false, quick = false;
  app.add_option("--checkpoint", checkpoint, "trained model checkpoint")->required();
  app.add_option("--cli", cli, "tinylayout binary")->required();
  app.add_option("--work", work, "scratch directory")->required();
  app.add_option("--only", only, "comma-separated criterion numbers");
  app.add_flag("--prepare", do_prepare, "train the model if the checkpoint is missing, then exit");
  app.add_flag("--quick", quick, "pilot run with a tenth of the samples; prints INFO, never PASS");
  CLI11_PARSE(app, argc, argv);
  if (quick) {
    for (auto* n : {&kVisorPrompts, &kLocalizationTrials, &kEotSeeds, &kEditSeeds, &kRegressionPrompts}) *n /= 10;
  }

  Context ctx{checkpoint, cli, work, {}, {}, {}};
  fs::create_directories(ctx.work);
  if (do_prepare) return prepare(ctx);

  std::set<int> selected;
  if (!only.empty()) {
    std::stringstream in(only);
    for (std::string s; std::getline(in, s, ',');) selected.insert(std::stoi(s));
  }
  auto wanted = [&](int id) { return selected.empty() || selected.count(id); };
  if (!fs::exists(ctx.checkpoint) && (wanted(6) || wanted(7) || wanted(8) || wanted(9) || wanted(10) || wanted(11))) {
    std::cerr << "missing trained checkpoint " << ctx.checkpoint << "; run with --prepare first\n";
  }

  std::optional<VisorSweep> sweep;
  auto need_sweep = [&]() -> const VisorSweep& {
    if (!sweep) sweep = run_sweep(ctx);
    return *sweep;
  };
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"forward bias suite", forward_bias_suite},
      {"layout energy suite", energy_suite},
      {"energy gradient vs finite differences", gradient_oracle},
      {"schedule / CFG / q_sample suite", schedule_suite},
      {"metric oracles", metric_oracles},
      {"VISOR direction after training", [&] { return visor_direction(need_sweep()); }},
      {"guidance cost ordering", [&] { return cost_ordering(need_sweep()); }},
      {"in-box attention localization", [&] { return localization(need_sweep()); }},
      {"padding-only guidance", [&] { return padding_only(ctx); }},
      {"editing pipeline", [&] { return editing(ctx); }},
      {"CLI determinism", [&] { return cli_determinism(ctx); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted(id)) continue;
    Verdict v;
    const auto start = Clock::now();
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const bool pilot = quick && id >= 6 && id <= 10;
    failed += !v.pass && !pilot;
    std::cout << (pilot ? "INFO" : v.pass ? "PASS" : "FAIL") << "  " << id << "  " << criteria[i].first << ": " << v.detail
              << fmt(" [%.0f s]", seconds_since(start)) << std::endl;
  }
  return failed == 0 ? 0 : 1;
}

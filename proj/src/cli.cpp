#include "bootleg/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "bootleg/analysis.hpp"
#include "bootleg/checkpoint.hpp"
#include "bootleg/masking.hpp"
#include "bootleg/probe.hpp"
#include "bootleg/train.hpp"

namespace bootleg {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::UnknownKey:
    case ErrorCode::DimNotDivisible:
    case ErrorCode::UnsupportedStrategy:
      return kExitConfig;
    default:
      return kExitRuntime;
  }
}

Dataset make_dataset(const RunConfig& cfg, bool held_out) {
  const std::string& src = held_out ? cfg.test_data : cfg.train_data;
  if (src != "synthetic") return load_image_folder(src);
  return synthetic_shapes(held_out ? cfg.synthetic_test : cfg.synthetic_train,
                          cfg.synthetic_classes, cfg.train.vit.image_side,
                          derive_seed(cfg.train.seed ^ kDataStream, held_out ? 1 : 0, 0));
}

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool needs_out = true) {
  sub->add_option("-c,--config", c.config, "config file (key = value lines)");
  sub->add_option("--set", c.sets, "override, key=value (repeatable)");
  sub->add_option("--seed", c.seed, "global seed override");
  auto* o = sub->add_option("-o,--out", c.out, "output directory");
  if (needs_out) o->required();
}

RunConfig resolve(const Common& c) {
  auto sets = c.sets;
  if (c.seed) sets.push_back("seed=" + std::to_string(*c.seed));
  return load_config(c.config, sets);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorCode::Io, "cannot write " + path.string());
  os << text;
  require(static_cast<bool>(os), ErrorCode::Io, "failed writing " + path.string());
}

fs::path prepare_out(const std::string& out, const RunConfig& cfg) {
  const fs::path dir(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::Io, "cannot create " + dir.string());
  write_text(dir / "config.resolved",
             "# bootleg " + version_stamp() + "\n" + resolved_config_text(cfg));
  return dir;
}

EncoderParams<float> load_encoder(const RunConfig& cfg, const std::string& ckpt,
                                  std::string* hash) {
  const Checkpoint ck = load_checkpoint(ckpt);
  Rng rng(0);
  EncoderParams<float> enc = init_encoder<float>(cfg.train.vit, rng);
  restore_arrays(enc, "student.", ck);
  if (hash) *hash = ck.manifest.value("config_hash", std::string("unknown"));
  return enc;
}

Tensor<float> eval_images(const RunConfig& cfg, const Dataset& ds, std::size_t n,
                          double crop) {
  const int side = cfg.train.vit.image_side;
  const std::size_t per = static_cast<std::size_t>(side) * side * 3;
  Tensor<float> out(Shape{n, static_cast<std::size_t>(side), static_cast<std::size_t>(side), 3});
#pragma omp parallel for schedule(static)
  for (std::size_t i = 0; i < n; ++i) {
    Tensor<float> img = center_crop(ds.images[i], side, crop);
    normalize(img, cfg.train.normalization);
    std::copy(img.data(), img.data() + per, out.data() + i * per);
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss << std::setprecision(10) << v;
  return ss.str();
}

json summary_json(const Summary& s) {
  return {{"mean", s.mean}, {"stdev", s.stdev}, {"min", s.min}, {"max", s.max}};
}

std::string grid_csv(const std::vector<double>& v, int h, int w) {
  std::string out;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c)
      out += (c ? "," : "") + fmt(v[static_cast<std::size_t>(r) * w + c]);
    out += "\n";
  }
  return out;
}

std::string matrix_csv(const SquareMatrix& m, const std::vector<std::string>& labels) {
  std::string out = "layer";
  for (const auto& l : labels) out += "," + l;
  out += "\n";
  for (std::size_t a = 0; a < m.n; ++a) {
    out += labels[a];
    for (std::size_t b = 0; b < m.n; ++b) out += "," + fmt(m(a, b));
    out += "\n";
  }
  return out;
}

/// Mismatch descriptions; empty when the report matches the golden record.
std::vector<std::string> golden_mismatches(const json& golden, const json& report) {
  std::vector<std::string> bad;
  const double tol = golden.value("tolerance_pp", 0.5);
  if (golden.contains("shapes")) {
    for (const auto& [key, want] : golden["shapes"].items()) {
      const double got = report["shapes"].value(key, 0.0);
      if (std::abs(got - want.get<double>()) > tol)
        bad.push_back("shape " + key + ": " + fmt(got) + "% vs " + fmt(want.get<double>()) + "%");
    }
  }
  for (const char* group : {"visible_fraction", "target_fraction"}) {
    if (!golden.contains(group)) continue;
    for (const auto& [stat, spec] : golden[group].items()) {
      const double want = spec.at(0).get<double>(), t = spec.at(1).get<double>();
      const double got = report[group].value(stat, 0.0);
      if (std::abs(got - want) > t)
        bad.push_back(std::string(group) + "." + stat + ": " + fmt(got) + " vs " + fmt(want) +
                      " +- " + fmt(t));
    }
  }
  return bad;
}

int cmd_pretrain(const Common& c, const std::string& resume, std::size_t stop_after,
                 std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = prepare_out(c.out, cfg);
  const Dataset ds = make_dataset(cfg, false);
  RunOptions opt;
  opt.out_dir = dir;
  if (!resume.empty()) opt.resume_from = resume;
  opt.checkpoint_every = cfg.checkpoint_every;
  opt.stop_after = stop_after;
  opt.config_text = resolved_config_text(cfg);
  const Schedule sched = make_schedule(cfg.train, ds.size());
  opt.on_step = [&](const StepMetrics& m) {
    if (m.loss && (m.step == 1 || m.step % 50 == 0 || m.step == sched.total_steps))
      out << "step " << m.step << "/" << sched.total_steps << " loss " << fmt(*m.loss)
          << " lr " << fmt(m.lr) << "\n" << std::flush;
  };
  const TrainState st = run_pretraining(cfg.train, ds, opt);
  out << "pretrain: " << st.step << " steps, checkpoint " << (dir / "checkpoint").string()
      << "\n";
  return kExitOk;
}

int cmd_probe(const Common& c, const std::string& ckpt, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = prepare_out(c.out, cfg);
  std::string hash;
  const EncoderParams<float> enc = load_encoder(cfg, ckpt, &hash);
  const Dataset train = make_dataset(cfg, false);
  const Dataset test = make_dataset(cfg, true);
  const ProbeReport rep =
      train_probe(enc, cfg.train.vit, train, test, cfg.probe, cfg.train.normalization);
  std::string csv = "kind,lr,wd,accuracy\n";
  for (const auto& r : rep.rows)
    csv += to_string(r.kind) + "," + fmt(r.lr) + "," + fmt(r.wd) + "," + fmt(r.accuracy) + "\n";
  write_text(dir / "probe.csv", csv);
  const auto& best = rep.rows[rep.best_index];
  const json summary = {{"kind", to_string(cfg.probe.kind)},
                        {"best_accuracy", rep.best_accuracy},
                        {"best_lr", best.lr},
                        {"best_wd", best.wd},
                        {"configs", rep.rows.size()},
                        {"classes", train.classes()},
                        {"checkpoint_config_hash", hash}};
  write_text(dir / "probe_summary.json", summary.dump(2) + "\n");
  out << "probe " << to_string(cfg.probe.kind) << ": best accuracy " << fmt(rep.best_accuracy)
      << " (lr " << fmt(best.lr) << ", wd " << fmt(best.wd) << ")\n";
  return kExitOk;
}

int cmd_mask_stats(const Common& c, std::uint64_t draws, const std::string& golden,
                   std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = prepare_out(c.out, cfg);
  const StrategyConfig& mcfg = cfg.train.masking;
  json report;
  if (mcfg.strategy == MaskStrategy::MultiBlock) {
    const auto hist = shape_histogram(mcfg.multiblock, cfg.train.seed, draws);
    std::string csv = "h,w,area,count,percent\n";
    report["shapes"] = json::object();
    for (const auto& [shape, n] : hist) {
      const double pct = 100.0 * static_cast<double>(n) / static_cast<double>(draws);
      csv += std::to_string(shape.h) + "," + std::to_string(shape.w) + "," +
             std::to_string(shape.h * shape.w) + "," + std::to_string(n) + "," + fmt(pct) + "\n";
      report["shapes"][std::to_string(shape.h) + "x" + std::to_string(shape.w)] = pct;
    }
    write_text(dir / "shapes.csv", csv);
  }
  const StatsReport st =
      mask_statistics(mcfg, cfg.train.per_worker_batch, cfg.stats_batches, cfg.train.seed);
  report["samples"] = st.samples;
  report["per_worker_batch"] = cfg.train.per_worker_batch;
  report["grid"] = {st.grid_h, st.grid_w};
  report["visible_fraction"] = summary_json(st.visible_fraction);
  report["target_fraction"] = summary_json(st.target_fraction);
  report["adjacency_rate"] = summary_json(st.adjacency_rate);
  write_text(dir / "mask_stats.json", report.dump(2) + "\n");
  write_text(dir / "visible_freq.csv", grid_csv(st.visible_freq, st.grid_h, st.grid_w));
  write_text(dir / "target_freq.csv", grid_csv(st.target_freq, st.grid_h, st.grid_w));
  out << "mask-stats: " << st.samples << " samples, seen " << fmt(st.visible_fraction.mean)
      << " +- " << fmt(st.visible_fraction.stdev) << ", target "
      << fmt(st.target_fraction.mean) << " +- " << fmt(st.target_fraction.stdev) << "\n";
  if (!golden.empty()) {
    std::ifstream is(golden);
    require(static_cast<bool>(is), ErrorCode::Io, "cannot read golden file " + golden);
    const auto bad = golden_mismatches(json::parse(is), report);
    for (const auto& b : bad) err << "mismatch: " << b << "\n";
    require(bad.empty(), ErrorCode::GoldenMismatch,
            std::to_string(bad.size()) + " statistic(s) outside the golden tolerance");
    out << "golden: all statistics within tolerance\n";
  }
  return kExitOk;
}

int cmd_dump(const Common& c, const std::string& ckpt, std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = prepare_out(c.out, cfg);
  const EncoderParams<float> enc = load_encoder(cfg, ckpt, nullptr);
  const Dataset test = make_dataset(cfg, true);
  const std::size_t n = std::min(cfg.dump_images, test.size());
  const Tensor<float> images = eval_images(cfg, test, n, cfg.probe.eval_crop);
  const Checkpoint ck = load_checkpoint(ckpt);
  const std::uint64_t hash =
      std::stoull(ck.manifest.value("config_hash", std::string("0")), nullptr, 16);
  const EmbeddingDump d = dump_embeddings(enc, cfg.train.vit, images, hash);
  write_dump((dir / "embeddings.bin").string(), d);
  out << "dump-embeddings: " << d.layers.size() << " layers x " << d.images << " images x "
      << d.tokens << " tokens x " << d.dim << "\n";
  return kExitOk;
}

int cmd_analyze(const Common& c, const std::string& dump_path, std::vector<std::string> taps,
                std::ostream& out) {
  const RunConfig cfg = resolve(c);
  const fs::path dir = prepare_out(c.out, cfg);
  const EmbeddingDump d = read_dump(dump_path);
  if (taps.empty())
    for (const auto& t : cfg.train.targets.taps)
      if (t.kind == TapKind::BlockOut) taps.push_back("block" + std::to_string(t.layer));

  const PearsonResult pr = pearson_matrix(d);
  write_text(dir / "pearson.csv", matrix_csv(pr.matrix, d.labels));
  write_text(dir / "cka.csv", matrix_csv(cka_matrix(d), d.labels));

  std::string prof = "tap,layer,pearson\n";
  for (const auto& [tap, row] : target_layer_profiles(d, taps))
    for (std::size_t l = 0; l < row.size(); ++l)
      prof += tap + "," + d.labels[l] + "," + fmt(row[l]) + "\n";
  write_text(dir / "profiles.csv", prof);

  std::string radial = "layer,distance,correlation\n";
  for (std::size_t l = 0; l < d.layers.size(); ++l)
    for (const auto& [dist, r] : spatial_autocorr(d, l).radial)
      radial += d.labels[l] + "," + fmt(dist) + "," + fmt(r) + "\n";
  write_text(dir / "autocorr_radial.csv", radial);

  const json summary = {{"layers", d.labels},
                        {"images", d.images},
                        {"tokens", d.tokens},
                        {"dim", d.dim},
                        {"zero_variance_vectors", pr.zero_variance}};
  write_text(dir / "analysis_summary.json", summary.dump(2) + "\n");
  out << "analyze: " << d.labels.size() << " layers, " << pr.zero_variance
      << " zero-variance vectors\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bootleg multi-layer self-distillation pretraining"};
  app.set_version_flag("--version", version_stamp());
  app.require_subcommand(1);

  Common pre, probe, stats, dump, analyze;
  std::string resume, ckpt_probe, ckpt_dump, golden, dump_path;
  std::size_t stop_after = 0;
  std::uint64_t draws = 1000000;
  std::vector<std::string> taps;

  auto* s_pre = app.add_subcommand("pretrain", "run pretraining");
  add_common(s_pre, pre);
  s_pre->add_option("--resume", resume, "checkpoint directory to continue from");
  s_pre->add_option("--stop-after", stop_after, "stop after this many total steps");

  auto* s_probe = app.add_subcommand("probe", "train frozen-encoder probes");
  add_common(s_probe, probe);
  s_probe->add_option("--checkpoint", ckpt_probe, "pretraining checkpoint directory")->required();

  auto* s_stats = app.add_subcommand("mask-stats", "mask shape and rate statistics");
  add_common(s_stats, stats);
  s_stats->add_option("--draws", draws, "rectangle shape draws");
  s_stats->add_option("--golden", golden, "JSON record to compare against");

  auto* s_dump = app.add_subcommand("dump-embeddings", "write per-layer patch embeddings");
  add_common(s_dump, dump);
  s_dump->add_option("--checkpoint", ckpt_dump, "pretraining checkpoint directory")->required();

  auto* s_an = app.add_subcommand("analyze", "inter-layer similarity analysis of a dump");
  add_common(s_an, analyze);
  s_an->add_option("--dump", dump_path, "embedding dump file")->required();
  s_an->add_option("--taps", taps, "target layer labels for profiles, e.g. block4");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    if (!rev.empty()) rev.pop_back();  // program name
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version_stamp() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: code=" << to_string(ErrorCode::InvalidConfig) << " msg=" << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (s_pre->parsed()) return cmd_pretrain(pre, resume, stop_after, out);
    if (s_probe->parsed()) return cmd_probe(probe, ckpt_probe, out);
    if (s_stats->parsed()) return cmd_mask_stats(stats, draws, golden, out, err);
    if (s_dump->parsed()) return cmd_dump(dump, ckpt_dump, out);
    if (s_an->parsed()) return cmd_analyze(analyze, dump_path, taps, out);
  } catch (const Error& e) {
    err << "error: code=" << to_string(e.code()) << " msg=" << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: code=Runtime msg=" << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace bootleg

#pragma once

// Command-line front end. Exit codes: 0 success, 1 validation failure or
// runtime error, 2 usage error.

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ere/allocator.hpp"
#include "ere/analysis.hpp"
#include "ere/codec.hpp"
#include "ere/spectral.hpp"
#include "ere/tensor_archive.hpp"

namespace ere::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Shortest round-trip decimal form.
inline std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline std::size_t resolve_threads(std::size_t flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("ERE_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return 1;
}

inline std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size()) throw CLI::ValidationError("list", "bad number '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError("list", "empty list");
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

struct Options {
  std::string base, finetuned, ere, out;
  std::size_t rank = 0;
  int bits = 4;
  double alpha = 0.5;
  std::vector<std::string> exclude;
  std::size_t min_dim = 8;
  std::string raw_dtype = "f32";
  bool lossless = false;
  bool uniform = false;
  bool no_projection = false;
  std::size_t threads = 0;
  double tol = 1e-2;
  double min_cosine = 0.99;
  std::string report;
  std::string csv;
  std::size_t seeds = 10;
  std::uint64_t seed = 0;
  std::string sigmas = "0.05,0.1,0.2,0.5";
  double keep_fraction = 0.8;
  std::string alphas = "0,0.25,0.5,0.75,1";
};

inline std::optional<std::pair<TensorMap, TensorMap>> load_pair(const Options& o) {
  if (o.base.empty() && o.finetuned.empty()) return std::nullopt;
  if (o.base.empty() || o.finetuned.empty()) throw CLI::ValidationError("--base and --finetuned go together");
  return std::make_pair(archive::read_archive(o.base), archive::read_archive(o.finetuned));
}

// ---------------------------------------------------------------- commands

inline int cmd_encode(const Options& o, std::ostream& out) {
  const auto base = archive::read_archive(o.base);
  const auto ft = archive::read_archive(o.finetuned);
  codec::EreConfig cfg;
  cfg.prior_rank = o.rank;
  cfg.bits = o.bits;
  cfg.alpha = o.alpha;
  cfg.exclude = o.exclude;
  cfg.min_dim_eligible = o.min_dim;
  cfg.raw_dtype = parse_dtype(o.raw_dtype);
  cfg.lossless = o.lossless;
  cfg.uniform_rank = o.uniform;
  cfg.threads = resolve_threads(o.threads);
  const auto a = codec::encode(base, ft, cfg);
  const auto bytes = codec::write_ere(a, o.out);
  std::size_t lowrank = 0, raw = 0, zero = 0;
  std::uint64_t used = 0;
  for (const auto& l : a.layers) {
    if (l.kind == codec::LayerKind::lowrank) {
      ++lowrank;
      used += l.rank * (l.n + l.m);
    } else if (l.kind == codec::LayerKind::raw) {
      ++raw;
    } else {
      ++zero;
    }
  }
  out << "encoded " << a.layers.size() << " tensors (" << lowrank << " lowrank, " << raw << " raw, " << zero
      << " zero); budget " << a.budget << ", used " << used << "; wrote " << bytes << " bytes to " << o.out
      << "\n";
  if (a.saturated_values) out << "warning: " << a.saturated_values << " singular values saturated to binary16 max\n";
  return kExitOk;
}

inline int cmd_decode(const Options& o, std::ostream& out) {
  const auto base = archive::read_archive(o.base);
  const auto a = codec::read_ere(o.ere);
  const auto recon = codec::decode(base, a, {!o.no_projection, resolve_threads(o.threads)});
  const auto bytes = archive::write_archive(recon, o.out);
  out << "decoded " << recon.size() << " tensors; wrote " << bytes << " bytes to " << o.out << "\n";
  return kExitOk;
}

inline std::string stats_csv(const codec::SizeReport& r) {
  std::ostringstream s;
  s << "layer,kind,n,m,rank,u_codes,u_scales,d,v_codes,v_scales,raw,total,fp32_bytes,ratio\n";
  for (const auto& l : r.layers)
    s << l.name << "," << codec::kind_name(l.kind) << "," << l.n << "," << l.m << "," << l.rank << ","
      << l.bytes.u_codes << "," << l.bytes.u_scales << "," << l.bytes.d << "," << l.bytes.v_codes << ","
      << l.bytes.v_scales << "," << l.bytes.raw << "," << l.bytes.total() << "," << l.fp32_bytes << ","
      << num(l.ratio_vs_fp32()) << "\n";
  s << "__header__,,,,,,,,,,," << r.header_bytes << ",,\n";
  s << "__total__,,,,,,,,,,," << r.total_bytes << "," << r.fp32_full_bytes << "," << num(r.ratio_vs_full()) << "\n";
  return s.str();
}

inline int cmd_stats(const Options& o, std::ostream& out) {
  const auto a = codec::read_ere(o.ere);
  const auto r = codec::size_report(a);
  out << std::left << std::setw(32) << "layer" << std::setw(9) << "kind" << std::right << std::setw(8) << "rank"
      << std::setw(14) << "bytes" << std::setw(12) << "vs fp32" << "\n";
  for (const auto& l : r.layers) {
    std::ostringstream pct;
    pct << std::fixed << std::setprecision(3) << 100.0 * l.ratio_vs_fp32() << "%";
    out << std::left << std::setw(32) << l.name << std::setw(9) << codec::kind_name(l.kind) << std::right
        << std::setw(8) << l.rank << std::setw(14) << l.bytes.total() << std::setw(12) << pct.str() << "\n";
  }
  std::ostringstream full, res;
  full << std::fixed << std::setprecision(3) << 100.0 * r.ratio_vs_full() << "%";
  res << std::fixed << std::setprecision(3) << 100.0 * r.ratio_vs_residual() << "%";
  out << "header bytes: " << r.header_bytes << "\n"
      << "payload bytes: " << r.payload_bytes << " (codes " << r.code_bytes << ")\n"
      << "total bytes: " << r.total_bytes << "\n"
      << "vs fp32 weights: " << full.str() << ", lowrank vs fp32 residual: " << res.str() << "\n";
  if (!o.csv.empty()) write_text(o.csv, stats_csv(r));
  return kExitOk;
}

inline std::vector<spectral::SpectralProfile> residual_profiles(const TensorMap& base, const TensorMap& ft,
                                                                const std::vector<std::string>& exclude,
                                                                std::size_t min_dim) {
  const auto res = codec::compute_residual(base, ft);
  std::vector<spectral::SpectralProfile> profiles;
  for (const auto& [name, t] : res.matched) {
    if (!t.is_matrix() || std::min(t.rows(), t.cols()) < min_dim || codec::matches_any(name, exclude)) continue;
    if (std::all_of(t.values.begin(), t.values.end(), [](float x) { return x == 0.0f; })) continue;
    profiles.push_back(spectral::build_profile(t, name));
  }
  return profiles;
}

inline int cmd_allocate(const Options& o, std::ostream& out) {
  const auto base = archive::read_archive(o.base);
  const auto ft = archive::read_archive(o.finetuned);
  const auto profiles = residual_profiles(base, ft, o.exclude, o.min_dim);
  if (profiles.empty()) throw Error("no eligible 2-D layers to allocate");
  const auto plan = allocator::allocate(profiles, {o.rank, o.alpha, 1e-9, o.min_dim});
  std::ostringstream csv;
  csv << "layer,n,m,continuous_rank,rank,param_cost,tail_energy_at_rank\n";
  for (std::size_t i = 0; i < plan.layers.size(); ++i) {
    const auto& l = plan.layers[i];
    csv << l.name << "," << l.n << "," << l.m << "," << num(l.continuous_rank) << "," << l.rank << ","
        << l.param_cost() << "," << num(allocator::tail_at(profiles[i], l.rank)) << "\n";
  }
  write_text(o.out, csv.str());
  out << "allocated " << plan.layers.size() << " layers; budget " << plan.budget << ", used "
      << plan.used_budget() << ", lambda " << num(plan.lambda_star) << "; wrote " << o.out << "\n";
  return kExitOk;
}

inline int cmd_spectra(const Options& o, std::ostream& out) {
  const auto base = archive::read_archive(o.base);
  const auto ft = archive::read_archive(o.finetuned);
  const auto res = codec::compute_residual(base, ft);
  std::filesystem::create_directories(o.out);

  std::ostringstream spectra, eranks;
  spectra << "layer,index,sigma_normalized,erank,erank_ratio,mp_reference\n";
  eranks << "layer,n,m,erank_base,erank_residual,erank_ratio\n";
  std::size_t count = 0;
  for (const auto& [name, delta] : res.matched) {
    if (!delta.is_matrix() || std::min(delta.rows(), delta.cols()) == 0) continue;
    const auto sigma = spectral::singular_values(to_matrix(delta));
    if (sigma.empty() || sigma.front() <= 0.0) continue;
    const double er_res = spectral::effective_rank(sigma);
    const double er_base = spectral::effective_rank(spectral::singular_values(to_matrix(base.at(name))));
    const double ratio = er_res / er_base;
    const std::size_t k = sigma.size();
    const double lambda = double(std::min(delta.rows(), delta.cols())) / double(std::max(delta.rows(), delta.cols()));
    std::vector<double> qs;
    for (std::size_t l = 0; l < k; ++l) qs.push_back(1.0 - (double(l) + 0.5) / double(k));
    const auto mp = spectral::mp_singular_quantiles(lambda, qs);
    const double mp_top = 1.0 + std::sqrt(lambda);
    for (std::size_t l = 0; l < k; ++l)
      spectra << name << "," << l + 1 << "," << num(sigma[l] / sigma.front()) << "," << num(er_res) << ","
              << num(ratio) << "," << num(mp[l] / mp_top) << "\n";
    eranks << name << "," << delta.rows() << "," << delta.cols() << "," << num(er_base) << "," << num(er_res)
           << "," << num(ratio) << "\n";
    ++count;
  }
  write_text(std::filesystem::path(o.out) / "spectra.csv", spectra.str());
  write_text(std::filesystem::path(o.out) / "erank.csv", eranks.str());
  out << "wrote spectra for " << count << " layers to " << o.out << "\n";
  return kExitOk;
}

inline int cmd_verify(const Options& o, std::ostream& out) {
  const auto base = archive::read_archive(o.base);
  const auto ft = archive::read_archive(o.finetuned);
  const auto bytes = archive::detail::read_file(o.ere);
  const auto rep = codec::verify(base, ft, bytes, {o.tol, o.min_cosine}, {!o.no_projection, resolve_threads(o.threads)});
  std::ostringstream csv;
  csv << "layer,kind,rank,relative_error,residual_relative_error,cosine,pass\n";
  for (const auto& l : rep.layers)
    csv << l.name << "," << codec::kind_name(l.kind) << "," << l.rank << "," << num(l.relative_error) << ","
        << num(l.residual_relative_error) << "," << num(l.cosine) << "," << (l.pass ? "pass" : "fail") << "\n";
  if (!o.report.empty()) write_text(o.report, csv.str());
  double worst = 0.0;
  std::size_t failed = 0;
  for (const auto& l : rep.layers) {
    worst = std::max(worst, l.relative_error);
    failed += !l.pass;
  }
  for (const auto& p : rep.problems) out << "problem: " << p << "\n";
  out << "checksum " << (rep.checksum_ok ? "ok" : "FAILED") << ", budget " << (rep.budget_ok ? "ok" : "FAILED")
      << ", " << rep.layers.size() << " layers checked, " << failed << " failed, worst relative error "
      << num(worst) << "\n"
      << (rep.pass() ? "PASS" : "FAIL") << "\n";
  return rep.pass() ? kExitOk : kExitFailure;
}

inline int cmd_perturb(const Options& o, std::ostream& out) {
  const auto sigmas = parse_list(o.sigmas);
  std::ostringstream csv;
  csv << "seed,experiment,parameter,mode,cosine\n";
  auto run_one = [&](std::uint64_t seed, const TensorMap& theta, const TensorMap& theta_prime) {
    const auto delta = analysis::difference(theta_prime, theta);
    const auto probes = analysis::default_probes(theta);
    const auto ref = analysis::ToyNet::from_tensors(theta_prime);
    using analysis::PerturbMode;
    for (double s : sigmas)
      for (auto mode : {PerturbMode::full, PerturbMode::residual}) {
        const auto p = analysis::perturb(theta, delta, {s, mode, seed});
        csv << seed << ",lognormal," << num(s) << "," << (mode == PerturbMode::full ? "full" : "residual") << ","
            << num(analysis::feature_cosine(analysis::ToyNet::from_tensors(p), ref, probes)) << "\n";
      }
    for (auto mode : {PerturbMode::full, PerturbMode::residual}) {
      const auto p = analysis::lowrank_perturb(theta, delta, o.keep_fraction, mode);
      csv << seed << ",lowrank," << num(o.keep_fraction) << "," << (mode == PerturbMode::full ? "full" : "residual")
          << "," << num(analysis::feature_cosine(analysis::ToyNet::from_tensors(p), ref, probes)) << "\n";
    }
  };
  if (auto pair = load_pair(o)) {
    run_one(o.seed, pair->first, pair->second);
  } else {
    for (std::size_t i = 0; i < o.seeds; ++i) {
      const auto toy = analysis::train_toy_pair(o.seed + i);
      run_one(o.seed + i, toy.theta, toy.theta_prime);
    }
  }
  write_text(o.out, csv.str());
  out << "wrote perturbation results to " << o.out << "\n";
  return kExitOk;
}

inline int cmd_alpha_sweep(const Options& o, std::ostream& out) {
  const auto alphas = parse_list(o.alphas);
  for (double a : alphas)
    if (a < 0.0 || a > 1.0) throw CLI::ValidationError("--alphas", "alpha outside [0,1]");
  TensorMap theta, theta_prime;
  if (auto pair = load_pair(o)) {
    theta = std::move(pair->first);
    theta_prime = std::move(pair->second);
  } else {
    auto toy = analysis::train_toy_pair(o.seed);
    theta = std::move(toy.theta);
    theta_prime = std::move(toy.theta_prime);
  }
  const auto rows = analysis::alpha_sweep(theta, theta_prime, o.rank, alphas, o.bits);
  std::ostringstream csv;
  csv << "alpha,feature_cosine\n";
  for (const auto& r : rows) csv << num(r.alpha) << "," << num(r.cosine) << "\n";
  write_text(o.out, csv.str());
  out << "uniform-rank cosine " << num(analysis::uniform_rank_cosine(theta, theta_prime, o.rank, o.bits))
      << "; wrote " << rows.size() << " rows to " << o.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- parser

inline void build_app(CLI::App& app, Options& o) {
  app.require_subcommand(1);
  app.fallthrough(false);

  auto threads = [&](CLI::App* sub) {
    sub->add_option("--threads", o.threads, "Worker threads (default: $ERE_THREADS or 1)")->check(CLI::PositiveNumber);
  };
  auto pair = [&](CLI::App* sub, bool required) {
    auto* b = sub->add_option("--base", o.base, "Base checkpoint (TSA1)")->check(CLI::ExistingFile);
    auto* f = sub->add_option("--finetuned", o.finetuned, "Fine-tuned checkpoint (TSA1)")->check(CLI::ExistingFile);
    if (required) {
      b->required();
      f->required();
    }
  };

  auto* enc = app.add_subcommand("encode", "Compress the fine-tuned residual into an ERE1 archive");
  pair(enc, true);
  enc->add_option("--rank", o.rank, "Prior rank r_avg; sets the parameter budget")->required()->check(CLI::PositiveNumber);
  enc->add_option("--bits", o.bits, "Factor quantization bits")->capture_default_str()->check(CLI::IsMember({2, 4, 8}));
  enc->add_option("--alpha", o.alpha, "Mix weight toward the uniform prior rank")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  enc->add_option("--exclude", o.exclude, "Name glob stored raw instead of low-rank (repeatable)");
  enc->add_option("--min-dim", o.min_dim, "Smallest min(n,m) treated as low-rank")->capture_default_str();
  enc->add_option("--raw-dtype", o.raw_dtype, "Storage dtype for raw tensors")->capture_default_str()->check(CLI::IsMember({"f32", "f16"}));
  enc->add_flag("--lossless", o.lossless, "Debug: full rank, unquantized f32 factors");
  enc->add_flag("--uniform", o.uniform, "Give every layer the prior rank (skip allocation)");
  enc->add_option("--out", o.out, "Output ERE1 archive")->required();
  threads(enc);

  auto* dec = app.add_subcommand("decode", "Reconstruct fine-tuned weights from base + ERE1 archive");
  dec->add_option("--base", o.base, "Base checkpoint (TSA1)")->required()->check(CLI::ExistingFile);
  dec->add_option("--ere", o.ere, "ERE1 archive")->required()->check(CLI::ExistingFile);
  dec->add_option("--out", o.out, "Output TSA1 checkpoint")->required();
  dec->add_flag("--no-projection", o.no_projection, "Skip Stiefel projection of dequantized factors");
  threads(dec);

  auto* st = app.add_subcommand("stats", "Byte accounting of an ERE1 archive");
  st->add_option("--ere", o.ere, "ERE1 archive")->required()->check(CLI::ExistingFile);
  st->add_option("--csv", o.csv, "Also write the per-layer report as CSV");

  auto* al = app.add_subcommand("allocate", "Solve the rank allocation and emit the plan as CSV");
  pair(al, true);
  al->add_option("--rank", o.rank, "Prior rank r_avg; sets the parameter budget")->required()->check(CLI::PositiveNumber);
  al->add_option("--alpha", o.alpha, "Mix weight toward the uniform prior rank")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  al->add_option("--exclude", o.exclude, "Name glob left out of the allocation (repeatable)");
  al->add_option("--min-dim", o.min_dim, "Smallest min(n,m) treated as low-rank")->capture_default_str();
  al->add_option("--out", o.out, "Output CSV")->required();

  auto* sp = app.add_subcommand("spectra", "Residual singular spectra, effective ranks and M.P. reference");
  pair(sp, true);
  sp->add_option("--out", o.out, "Output directory for spectra.csv and erank.csv")->required();

  auto* ve = app.add_subcommand("verify", "Check an archive against the fine-tuned checkpoint");
  pair(ve, true);
  ve->add_option("--ere", o.ere, "ERE1 archive")->required()->check(CLI::ExistingFile);
  ve->add_option("--tol", o.tol, "Max per-layer relative Frobenius error")->capture_default_str()->check(CLI::NonNegativeNumber);
  ve->add_option("--min-cosine", o.min_cosine, "Min per-layer flattened cosine similarity")->capture_default_str();
  ve->add_option("--report", o.report, "Write the per-layer report as CSV");
  ve->add_flag("--no-projection", o.no_projection, "Skip Stiefel projection of dequantized factors");
  threads(ve);

  auto* pe = app.add_subcommand("perturb", "Log-normal and low-rank perturbation of weights vs residuals");
  pair(pe, false);
  pe->add_option("--seeds", o.seeds, "Number of toy pairs to train when no checkpoints are given")->capture_default_str()->check(CLI::PositiveNumber);
  pe->add_option("--seed", o.seed, "First seed (training and noise)")->capture_default_str();
  pe->add_option("--sigmas", o.sigmas, "Comma-separated noise standard deviations")->capture_default_str();
  pe->add_option("--keep-fraction", o.keep_fraction, "Fraction of rank kept in the low-rank experiment")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  pe->add_option("--out", o.out, "Output CSV")->required();

  auto* as = app.add_subcommand("alpha-sweep", "Feature cosine of encode/decode across prior-rank weights");
  pair(as, false);
  as->add_option("--rank", o.rank, "Prior rank r_avg")->required()->check(CLI::PositiveNumber);
  as->add_option("--bits", o.bits, "Factor quantization bits")->capture_default_str()->check(CLI::IsMember({2, 4, 8}));
  as->add_option("--alphas", o.alphas, "Comma-separated alpha values in [0,1]")->capture_default_str();
  as->add_option("--seed", o.seed, "Toy pair seed when no checkpoints are given")->capture_default_str();
  as->add_option("--out", o.out, "Output CSV")->required();
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Low-rank residual compression for fine-tuned checkpoints", "ere"};
  Options o;
  build_app(app, o);
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n";
    return kExitUsage;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    if (cmd == "encode") return cmd_encode(o, out);
    if (cmd == "decode") return cmd_decode(o, out);
    if (cmd == "stats") return cmd_stats(o, out);
    if (cmd == "allocate") return cmd_allocate(o, out);
    if (cmd == "spectra") return cmd_spectra(o, out);
    if (cmd == "verify") return cmd_verify(o, out);
    if (cmd == "perturb") return cmd_perturb(o, out);
    if (cmd == "alpha-sweep") return cmd_alpha_sweep(o, out);
  } catch (const CLI::ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace ere::cli

// Command-line front end: loads a JSON run configuration, executes one of the
// experiment subcommands, and writes CSV tables plus a plain-text run report.
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "jumpbsde/config.hpp"
#include "jumpbsde/io.hpp"
#include "jumpbsde/reference.hpp"
#include "jumpbsde/solver.hpp"

namespace fs = std::filesystem;
using namespace jumpbsde;

namespace {

struct CliOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::string cache_paths;
  std::string save_nets;
  std::string load_nets;
  int threads = 0;
};

int resolve_threads(int flag_value) {
  if (flag_value > 0) return flag_value;
  if (const char* env = std::getenv("JUMPBSDE_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 1;
}

struct Report {
  std::ofstream os;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  Report(const fs::path& dir, const RunConfig& cfg, const std::string& subcommand, int threads) {
    os.open(dir / "report.txt");
    os << "subcommand: " << subcommand << "\n";
    os << "seed: " << cfg.seed << "\n";
    os << "threads: " << threads << "\n";
    os << "seed split scheme: root = splitmix(seed); streams = root.split(purpose, index)\n"
       << "  purposes: paths/<resample step>, increments/<path>, train.init/<step>, "
          "train.sgd/<step>, rate/<path>\n";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(cfg.fingerprint()));
    os << "config fingerprint: " << buf << "\n";
    for (const auto& w : cfg.warnings) os << "warning: " << w << "\n";
    os << "config: " << cfg.canonical().dump(2) << "\n";
  }

  void line(const std::string& s) { os << s << "\n"; }

  void finish() {
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    os << "wall time: " << io::format_g12(secs) << " s\n";
  }
};

// headline solve path shared by `solve` and the oracle comparison
TrainedSolution run_solver(const AssembledRun& run, const RunConfig& cfg, const CliOptions& opt,
                           int threads) {
  SolverConfig sc;
  sc.batch = cfg.batch;
  sc.epochs = cfg.epochs;
  sc.minibatch = cfg.minibatch;
  sc.lr = cfg.lr;
  sc.hidden = cfg.hidden;
  sc.layers = cfg.layers;
  sc.threads = threads;
  sc.resample = cfg.resample;
  DeepBsdeSolver solver(run.coeffs, run.grid, run.partition, run.x0, sc);
  TrainedSolution sol = solver.run(SplitStream(cfg.seed));
  if (!opt.save_nets.empty()) io::save_nets(opt.save_nets, sol.nets);
  return sol;
}

int cmd_solve(const RunConfig& cfg, const AssembledRun& run, const CliOptions& opt,
              const fs::path& out, int threads) {
  Report rep(out, cfg, "solve", threads);
  if (!opt.cache_paths.empty()) {
    // materialize (or refresh) the path cloud used by the solver's first sweep
    PathBatch pb = simulate_forward(run.coeffs, run.grid, run.partition, run.x0, cfg.batch,
                                    SplitStream(cfg.seed).split("paths", 0), threads);
    io::save_paths(opt.cache_paths, pb);
  }
  TrainedSolution sol;
  if (!opt.load_nets.empty()) {
    sol.nets = io::load_nets(opt.load_nets);
    sol.terminal = run.coeffs.terminal;
    sol.grid = run.grid;
    sol.jump_terms = make_jump_terms(run.partition, run.coeffs);
    sol.zeta = run.coeffs.zeta;
  } else {
    sol = run_solver(run, cfg, opt, threads);
  }
  auto ev = sol.evaluate(0, run.x0);
  io::CsvWriter csv((out / "solve.csv").string(), "t,y0,z0,l0", cfg.fingerprint());
  csv.row({0.0, ev.y, ev.z ? (*ev.z)[0] : 0.0, ev.l ? *ev.l : 0.0});

  rep.line("Y0: " + io::format_g12(ev.y));
  if (ev.z) rep.line("Z0: " + io::format_g12((*ev.z)[0]));
  if (run.manufactured) {
    double exact = run.ustar.u(0.0, run.x0[0]);
    rep.line("u*(0,x0): " + io::format_g12(exact));
    rep.line("abs error: " + io::format_g12(std::fabs(ev.y - exact)));
  } else if (cfg.terminal_name == "identity" && cfg.b_name == "zero" &&
             cfg.driver_name == "zero") {
    rep.line("exact Y0 (martingale): " + io::format_g12(run.x0[0]));
    rep.line("relative error: " +
             io::format_g12(std::fabs(ev.y - run.x0[0]) / std::max(1e-30, std::fabs(run.x0[0]))));
  }
  // per-step training diagnostics
  io::CsvWriter hist((out / "training.csv").string(),
                     "step,initial_loss,final_train_loss,best_val_loss", cfg.fingerprint());
  for (std::size_t i = 0; i < sol.diagnostics.per_step.size(); ++i) {
    const auto& h = sol.diagnostics.per_step[i];
    hist.row({static_cast<double>(i), h.initial_loss, h.final_train_loss, h.best_val_loss});
  }
  rep.finish();
  return 0;
}

int cmd_oracle_intermediate(const RunConfig& cfg, const AssembledRun& run, const CliOptions& opt,
                            const fs::path& out, int threads) {
  Report rep(out, cfg, "oracle intermediate", threads);
  PathBatch pb;
  if (!opt.cache_paths.empty() && fs::exists(opt.cache_paths)) {
    pb = io::load_paths(opt.cache_paths);
  } else {
    pb = simulate_forward(run.coeffs, run.grid, run.partition, run.x0, cfg.batch,
                          SplitStream(cfg.seed).split("paths", 0), threads);
    if (!opt.cache_paths.empty()) io::save_paths(opt.cache_paths, pb);
  }
  std::vector<StepNetworks> nets;
  TrainedSolution sol;
  const TrainedSolution* sol_ptr = nullptr;
  if (!opt.load_nets.empty()) {
    sol.nets = io::load_nets(opt.load_nets);
    sol.terminal = run.coeffs.terminal;
    sol.grid = run.grid;
    sol.jump_terms = make_jump_terms(run.partition, run.coeffs);
    sol.zeta = run.coeffs.zeta;
    sol_ptr = &sol;
  }
  auto isol = solve_intermediate(run.coeffs, run.grid, run.partition, pb, sol_ptr);
  io::CsvWriter csv((out / "intermediate.csv").string(), "v0,v0_stderr", cfg.fingerprint());
  csv.row({isol.v0, isol.v0_stderr});
  rep.line("V0: " + io::format_g12(isol.v0));
  rep.line("V0 stderr: " + io::format_g12(isol.v0_stderr));
  if (run.manufactured)
    rep.line("abs error vs u*: " + io::format_g12(std::fabs(isol.v0 - run.ustar.u(0.0, run.x0[0]))));
  rep.finish();
  return 0;
}

int cmd_oracle_rates(const RunConfig& cfg, const AssembledRun& run, const fs::path& out,
                     int threads) {
  Report rep(out, cfg, "oracle rates", threads);
  // ladder above the configured eps; the reference path truncates at eps/4
  std::vector<double> epsilons;
  for (double e = cfg.eps * 8.0; e > cfg.eps * 0.999; e *= 0.5)
    if (e < cfg.r_max) epsilons.push_back(e);
  if (epsilons.size() < 2) throw std::runtime_error("oracle rates: eps ladder empty; lower eps");
  RateResult rr = smalljump_rate_experiment(run.coeffs, run.measure, epsilons, cfg.eps / 4.0,
                                            cfg.T, cfg.N, cfg.batch, SplitStream(cfg.seed),
                                            threads);
  io::CsvWriter csv((out / "rates.csv").string(), "eps,sigma_eps2,error,stderr,slope",
                    cfg.fingerprint());
  for (const auto& row : rr.rows) csv.row({row.eps, row.sigma_eps2, row.error, row.stderr_, rr.slope});
  rep.line("fitted slope: " + io::format_g12(rr.slope));
  for (const auto& row : rr.rows)
    if (row.flagged) rep.line("flagged: stderr > 25% of estimate at eps " + io::format_g12(row.eps));
  rep.finish();
  return 0;
}

int cmd_oracle_projections(const RunConfig& cfg, const AssembledRun& run, const fs::path& out,
                           int threads) {
  Report rep(out, cfg, "oracle projections", threads);
  // time projection: Z_s = sigma dx u*(s, X_s) on a fine subgrid when a
  // manufactured solution is configured, otherwise the Brownian case Z = W
  const int sub = 16;
  const int B = std::min(cfg.batch, 20000);
  TimeGrid fine = TimeGrid::uniform(cfg.T, cfg.N * sub);
  PathBatch pb = simulate_forward(run.coeffs, fine, run.partition, run.x0, B,
                                  SplitStream(cfg.seed).split("paths", 0), threads);
  MatrixXd z(B, cfg.N * sub + 1);
  MatrixXd anchors(B, cfg.N);
  for (int p = 0; p < B; ++p) {
    for (int k = 0; k <= cfg.N * sub; ++k) {
      double x = pb.states[k](p, 0);
      z(p, k) = run.manufactured ? cfg.sigma_value * run.ustar.du_dx(fine.nodes[k], x) : x;
    }
    for (int i = 0; i < cfg.N; ++i) anchors(p, i) = pb.states[i * sub](p, 0);
  }
  auto tproj = projection_error_time(z, anchors, TimeGrid::uniform(cfg.T, cfg.N), sub);

  // cell projection: U(t,x,e) = u*(t, x + beta) - u*(t, x) (or just e)
  std::function<double(double, double, double)> U;
  if (run.manufactured) {
    Smooth1D us = run.ustar;
    double bs = (cfg.beta_name == "scaled") ? cfg.beta_scale : 1.0;
    U = [us, bs](double t, double x, double e) { return us.u(t, x + bs * e) - us.u(t, x); };
  } else {
    U = [](double, double, double e) { return e; };
  }
  TimeGrid coarse = TimeGrid::uniform(cfg.T, cfg.N);
  PathBatch pb_coarse = simulate_forward(run.coeffs, coarse, run.partition, run.x0,
                                         std::min(B, 64), SplitStream(cfg.seed).split("paths", 0),
                                         threads);
  CellProjError cproj{0.0, 0.0};
  if (run.partition.total_mass > 0.0)
    cproj = projection_error_cells(U, pb_coarse, coarse, run.partition);

  io::CsvWriter csv((out / "projections.csv").string(), "kind,value,aux", cfg.fingerprint());
  csv.raw_row("time," + io::format_g12(tproj.value) + "," + io::format_g12(tproj.stderr_));
  csv.raw_row("cells," + io::format_g12(cproj.value) + "," + io::format_g12(cproj.tail_share));
  rep.line("R2_Z: " + io::format_g12(tproj.value) + " (stderr " + io::format_g12(tproj.stderr_) + ")");
  rep.line("R2_U: " + io::format_g12(cproj.value) + " (tail share " +
           io::format_g12(cproj.tail_share) + ")");
  rep.finish();
  return 0;
}

int cmd_partition_diag(const RunConfig& cfg, const AssembledRun& run, const fs::path& out,
                       int threads) {
  Report rep(out, cfg, "partition-diag", threads);
  const JumpPartition& part = run.partition;
  io::CsvWriter csv((out / "partition.csv").string(), "cell,a,b,sign,mass,rep,gamma_avg,tail",
                    cfg.fingerprint());
  for (std::size_t j = 0; j < part.size(); ++j) {
    const JumpCell& c = part.cells[j];
    csv.row({static_cast<double>(j), c.a, c.b, static_cast<double>(c.sign), c.mass, c.rep,
             c.gamma_avg, c.tail ? 1.0 : 0.0});
  }
  double r2 = part.total_mass > 0.0 ? gamma_quadrature_error(part, build_gamma(cfg)) : 0.0;
  rep.line("cells: " + std::to_string(part.size()));
  rep.line("total mass: " + io::format_g12(part.total_mass));
  rep.line("tail mass: " + io::format_g12(part.tail_mass));
  rep.line("k_h: " + io::format_g12(part.k_h()));
  rep.line("R2_gamma: " + io::format_g12(r2));
  rep.line("sigma_eps2: " +
           io::format_g12(part.epsilon > 0 ? truncation_variance(*part.measure, part.epsilon) : 0.0));
  rep.finish();
  return 0;
}

void write_failure(const fs::path& out, const std::string& subcommand, const std::string& what) {
  std::error_code ec;
  fs::create_directories(out, ec);
  std::ofstream os(out / "failure.json");
  nlohmann::json j;
  j["subcommand"] = subcommand;
  j["error"] = what;
  os << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep solver for nonlocal backward equations driven by jump processes"};
  app.require_subcommand(1);

  CliOptions opt;
  std::uint64_t seed_flag = 0;
  std::string out_flag;
  bool seed_set = false, out_set = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config_path, "JSON config file")->required();
    sub->add_option("--seed", seed_flag, "override config seed")->each([&](const std::string&) {
      seed_set = true;
    });
    sub->add_option("--out", out_flag, "override output directory")->each([&](const std::string&) {
      out_set = true;
    });
    sub->add_option("--cache-paths", opt.cache_paths, "binary path-cloud cache file");
    sub->add_option("--save-nets", opt.save_nets, "write trained nets here");
    sub->add_option("--load-nets", opt.load_nets, "reuse trained nets from here");
    sub->add_option("--threads", opt.threads, "worker threads (env JUMPBSDE_THREADS as fallback)");
  };

  CLI::App* solve = app.add_subcommand("solve", "train the solver and report Y0/Z0");
  CLI::App* oracle = app.add_subcommand("oracle", "reference computations");
  CLI::App* o_inter = oracle->add_subcommand("intermediate", "least-squares projection scheme");
  CLI::App* o_rates = oracle->add_subcommand("rates", "coupled small-jump strong-rate table");
  CLI::App* o_proj = oracle->add_subcommand("projections", "time/cell projection errors");
  CLI::App* pdiag = app.add_subcommand("partition-diag", "jump-space partition diagnostics");
  oracle->require_subcommand(1);
  for (CLI::App* sub : {solve, o_inter, o_rates, o_proj, pdiag}) add_common(sub);

  CLI11_PARSE(app, argc, argv);

  std::string subname = app.get_subcommands()[0]->get_name();
  if (subname == "oracle") subname += " " + oracle->get_subcommands()[0]->get_name();

  fs::path out_dir;
  try {
    RunConfig cfg = parse_config(opt.config_path);
    if (seed_set) cfg.seed = seed_flag;
    if (out_set) cfg.out = out_flag;
    out_dir = cfg.out;
    fs::create_directories(out_dir);
    for (const auto& w : cfg.warnings) std::cerr << "warning: " << w << "\n";
    int threads = resolve_threads(opt.threads);
    AssembledRun run = assemble(cfg);
    if (subname == "solve") return cmd_solve(cfg, run, opt, out_dir, threads);
    if (subname == "oracle intermediate")
      return cmd_oracle_intermediate(cfg, run, opt, out_dir, threads);
    if (subname == "oracle rates") return cmd_oracle_rates(cfg, run, out_dir, threads);
    if (subname == "oracle projections") return cmd_oracle_projections(cfg, run, out_dir, threads);
    if (subname == "partition-diag") return cmd_partition_diag(cfg, run, out_dir, threads);
    std::cerr << "unknown subcommand " << subname << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    write_failure(out_dir.empty() ? fs::path("out") : out_dir, subname, e.what());
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    write_failure(out_dir.empty() ? fs::path("out") : out_dir, subname, e.what());
    return 1;
  }
}

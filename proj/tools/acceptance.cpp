#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctrlflow/cli/ablate.hpp"
#include "ctrlflow/cli/oracle.hpp"

namespace {

using namespace ctrlflow;
using cli::OracleRow;

struct Outcome {
  int id = 0;
  std::string title;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
  std::vector<OracleRow> rows;
};

std::string summarize(const std::vector<OracleRow>& rows) {
  std::ostringstream s;
  s.precision(4);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const OracleRow& r = rows[i];
    s << (i ? "; " : "") << r.name << '=' << r.measured << (r.upper ? "<=" : ">=") << r.tolerance
      << (r.pass ? "" : " FAIL");
  }
  return s.str();
}

Outcome from_rows(int id, std::string title, std::vector<OracleRow> rows, double seconds, double budget) {
  rows.push_back(cli::make_row("runtime_seconds", seconds, budget, true));
  Outcome o{id, std::move(title), cli::all_pass(rows), summarize(rows), seconds, rows};
  return o;
}

// ------------------------------------------------------------ presets

/// Point-mass loop schedule shared by the length study and the end-to-end
/// comparison.
agent::LoopConfig pointmass_loop(int rounds) {
  agent::LoopConfig c;
  c.rounds = rounds;
  c.warmup_steps = 500;
  c.env_steps_per_round = 500;
  c.sac_updates_per_round = 500;
  c.sac_batch = 128;
  c.sac.actor_adam.lr = c.sac.critic_adam.lr = c.sac.alpha_adam.lr = 1e-3;
  c.flow_net.hidden = {64, 64};
  c.flow_net.time_width = 8;
  c.cfm.epochs = 20;
  c.cfm.batch_size = 128;
  c.cfm.adam.lr = 2e-3;
  c.control.epochs = 3;
  c.control.pairing = control::Pairing::reverse_flow;
  c.guidance.epochs = 10;
  c.sample.h = 5;
  c.gen_trajectories = 100;
  c.eval_episodes = 10;
  return c;
}

agent::LoopConfig length_loop() {
  agent::LoopConfig c = pointmass_loop(8);
  c.sac_updates_per_round = 300;
  c.cfm.epochs = 10;
  c.gen_trajectories = 40;
  return c;
}

agent::LoopConfig ctrlflow_loop() {
  agent::LoopConfig c = pointmass_loop(20);
  c.sample.control_on = true;
  c.sample.guidance_on = true;
  c.mixture_ratio = 0.8;
  return c;
}

constexpr int kSeeds = 5;

// ------------------------------------------------------------ criteria

Outcome ablations(const std::string& csv_dir) {
  cli::Stopwatch sw;
  const env::EnvSpec spec = env::point_mass_2d();
  std::vector<cli::ModelStudyRow> study;
  for (int s = 0; s < kSeeds; ++s) {
    for (const auto& r : cli::model_study(spec, cli::ModelStudyConfig{}, static_cast<std::uint64_t>(s))) {
      study.push_back(r);
    }
  }
  cli::write_rows_csv(csv_dir + "/ablate_models.csv", study);
  std::vector<OracleRow> rows;
  double guided_gap = 0.0;
  for (int h : {10, 15}) {
    double cos_gap = 0.0;
    for (const auto& r : study) {
      if (r.h == h) cos_gap += (r.cosine_control - r.cosine_plain) / kSeeds;
    }
    OracleRow row = cli::make_row("a.cosine_gain_h" + std::to_string(h), cos_gap, 0.0, false);
    row.pass = cos_gap > 0.0;
    rows.push_back(row);
  }
  for (const auto& r : study) guided_gap += (r.return_guided - r.return_plain) / static_cast<double>(study.size());
  rows.push_back(cli::make_row("b.guided_return_gain", guided_gap, 0.0, false));

  std::vector<cli::LengthStudyRow> lengths;
  const std::vector<int> hs{2, 5, 8, 10, 30, 50};
  std::vector<double> mean_final(hs.size(), 0.0);
  for (int s = 0; s < kSeeds; ++s) {
    for (std::size_t k = 0; k < hs.size(); ++k) {
      lengths.push_back(cli::length_run(length_loop(), spec, hs[k], static_cast<std::uint64_t>(s)));
      mean_final[k] += lengths.back().final_return / kSeeds;
    }
  }
  cli::write_rows_csv(csv_dir + "/ablate_gen_length.csv", lengths);
  const double best_short = *std::max_element(mean_final.begin(), mean_final.begin() + 4);
  const double best_long = std::max(mean_final[4], mean_final[5]);
  rows.push_back(cli::make_row("c.long_minus_best_short", best_long - best_short, 0.0, true));
  return from_rows(8, "ablation orderings (control, guidance, length)", rows, sw.seconds(), 1800.0);
}

Outcome efficiency(const std::string& csv_dir) {
  cli::Stopwatch sw;
  const env::EnvSpec spec = env::point_mass_2d();
  std::vector<cli::EfficiencyRow> runs;
  std::vector<double> ratios;
  for (int s = 0; s < kSeeds; ++s) {
    runs.push_back(cli::efficiency_run(ctrlflow_loop(), spec, static_cast<std::uint64_t>(s)));
    ratios.push_back(runs.back().ratio());
    std::printf("  seed %d: %s\n", s, runs.back().row().c_str());
    std::fflush(stdout);
  }
  cli::write_rows_csv(csv_dir + "/efficiency.csv", runs);
  std::vector<OracleRow> rows{cli::make_row("median_step_ratio", cli::median(ratios), 0.7, true)};
  return from_rows(9, "end-to-end sample efficiency vs plain SAC", rows, sw.seconds(), 3600.0);
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(const std::string& work) {
  cli::Stopwatch sw;
  agent::LoopConfig c = pointmass_loop(4);
  c.warmup_steps = 100;
  c.env_steps_per_round = 100;
  c.sac_updates_per_round = 50;
  c.sac_batch = 32;
  c.cfm.epochs = 2;
  c.control.epochs = 1;
  c.guidance.epochs = 2;
  c.sample.h = 3;
  c.sample.control_on = c.sample.guidance_on = true;
  c.gen_trajectories = 8;
  c.eval_episodes = 2;
  c.seed = 11;
  const env::EnvSpec spec = env::point_mass_2d();
  const std::string a = work + "/det_a", b = work + "/det_b", r = work + "/det_resume";
  for (const std::string& d : {a, b, r}) std::filesystem::remove_all(d);
  agent::run_dyna(c, spec, a);
  agent::run_dyna(c, spec, b);
  {
    agent::DynaRun partial(c, spec, r);
    partial.run(2);
  }
  agent::run_dyna(c, spec, r, true);
  const std::string ma = slurp(a + "/metrics.csv");
  const bool same = !ma.empty() && ma == slurp(b + "/metrics.csv");
  const bool resumed = ma == slurp(r + "/metrics.csv") &&
                       slurp(agent::DynaRun::checkpoint_path(a)) == slurp(agent::DynaRun::checkpoint_path(r));
  std::vector<OracleRow> rows{cli::make_row("same_seed_metrics_identical", same ? 1 : 0, 1, false),
                              cli::make_row("resume_metrics_and_checkpoint_identical", resumed ? 1 : 0, 1, false)};
  return from_rows(10, "determinism and resume", rows, sw.seconds(), 600.0);
}

Outcome suite(int id, const std::string& title, const std::function<std::vector<OracleRow>()>& fn, double budget) {
  cli::Stopwatch sw;
  std::vector<OracleRow> rows = fn();
  return from_rows(id, title, rows, sw.seconds(), budget);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::string work = "acceptance_runs";
  app.add_option("--only", only, "Run only these criteria (1-10)");
  app.add_option("--work-dir", work, "Directory for run artifacts and CSV outputs");
  CLI11_PARSE(app, argc, argv);
  set_thread_cap(1);
  std::filesystem::create_directories(work);
  const std::set<int> want(only.begin(), only.end());
  auto selected = [&](int id) { return want.empty() || want.count(id) > 0; };

  std::vector<Outcome> out;
  auto record = [&](Outcome o) {
    std::printf("criterion %2d %s  %s: %s (%.1fs)\n", o.id, o.pass ? "PASS" : "FAIL", o.title.c_str(),
                o.detail.c_str(), o.seconds);
    std::fflush(stdout);
    out.push_back(std::move(o));
  };
  try {
    if (selected(1)) record(suite(1, "gradient suite", [] { return cli::gradient_suite(10); }, 120.0));
    if (selected(2)) record(suite(2, "linear Gramian and minimum energy", cli::lti_suite, 60.0));
    if (selected(3)) record(suite(3, "variation of constants", cli::voc_suite, 60.0));
    if (selected(4)) record(suite(4, "steering and energy bound", cli::steering_suite, 120.0));
    if (selected(5)) record(suite(5, "nonlinear Gramian consistency", cli::gramian_suite, 120.0));
    if (selected(6)) record(suite(6, "distribution recovery", cli::distribution_suite, 300.0));
    if (selected(7)) record(suite(7, "tilted Gaussian guidance", cli::tilted_suite, 600.0));
    if (selected(8)) record(ablations(work));
    if (selected(9)) record(efficiency(work));
    if (selected(10)) record(determinism(work));
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance aborted: %s\n", e.what());
    return 2;
  }

  nlohmann::json report = nlohmann::json::array();
  bool ok = true;
  for (const Outcome& o : out) {
    nlohmann::json rows = nlohmann::json::array();
    for (const OracleRow& r : o.rows) {
      rows.push_back({{"name", r.name}, {"measured", r.measured}, {"tolerance", r.tolerance},
                      {"op", r.upper ? "<=" : ">="}, {"pass", r.pass}});
    }
    report.push_back({{"criterion", o.id}, {"title", o.title}, {"pass", o.pass}, {"seconds", o.seconds},
                      {"rows", rows}});
    ok = ok && o.pass;
  }
  std::ofstream(work + "/acceptance.json") << report.dump(2) << '\n';
  int passed = 0;
  for (const Outcome& o : out) passed += o.pass ? 1 : 0;
  std::printf("%d of %zu criteria passed\n", passed, out.size());
  return ok ? 0 : 1;
}

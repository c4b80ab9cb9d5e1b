#pragma once

// JSON and text renderings of run results, and the output directory writer.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>

#include <json.hpp>

#include "qkd/config.hpp"
#include "qkd/pipeline.hpp"

namespace qkd {

using json = nlohmann::ordered_json;

inline json to_json(const ProtocolParams& p) {
  json j = json::object();
  for (const auto& field : kConfigFields)
    std::visit([&](auto member) { j[std::string(field.key)] = p.*member; }, field.member);
  return j;
}

inline json to_json(const CountTable& t) {
  json j = json::object();
  for (auto b : {BasisId::K, BasisId::C}) {
    const std::string B(1, to_char(b));
    j["n_" + B + "_signal"] = t.detections(b, IntensityClass::Signal);
    j["n_" + B + "_decoy"] = t.detections(b, IntensityClass::Decoy);
    j["m_" + B + "_signal"] = t.errors(b, IntensityClass::Signal);
    j["m_" + B + "_decoy"] = t.errors(b, IntensityClass::Decoy);
    j["n_" + B + "_total"] = t.n_total(b);
    j["m_" + B + "_total"] = t.m_total(b);
  }
  return j;
}

inline json to_json(const DecoyBounds& b) {
  return json{{"tau0", b.tau0},
              {"tau1", b.tau1},
              {"eps_term", b.eps_term},
              {"n_K_mu_plus", b.K.n_mu_plus},
              {"n_K_nu_minus", b.K.n_nu_minus},
              {"s_K0_low", b.K.s0_low},
              {"s_K0_up", b.K.s0_up},
              {"s_K1_low", b.K.s1_low},
              {"n_C_mu_plus", b.C.n_mu_plus},
              {"n_C_nu_minus", b.C.n_nu_minus},
              {"s_C0_low", b.C.s0_low},
              {"s_C0_up", b.C.s0_up},
              {"s_C1_low", b.C.s1_low},
              {"m_C_mu_plus", b.m_C_mu_plus},
              {"m_C_nu_minus", b.m_C_nu_minus},
              {"v_C1_up", b.v_C1_up},
              {"warnings", b.warnings}};
}

inline json to_json(const SecurityAccounting& a) {
  return json{{"s_K0_low", a.s_K0_low},
              {"s_K1_low", a.s_K1_low},
              {"phi_K_up", a.phi_K_up},
              {"n_K", a.n_K},
              {"Q_K", a.Q_K},
              {"lambda_EC", a.lambda_EC},
              {"lambda_conf", a.lambda_conf},
              {"secrecy_penalty", a.secrecy_penalty},
              {"eps_sec", a.eps_sec},
              {"eps_cor", a.eps_cor},
              {"secret_length", a.secret_length},
              {"duration", a.duration},
              {"skr", a.skr}};
}

inline json to_json(const KeyAnalysis& k) {
  json j = to_json(k.accounting);
  j["bounds"] = to_json(k.bounds);
  return j;
}

inline json to_json(const SiftCounters& c) {
  return json{{"events", c.events},
              {"kept", c.kept},
              {"basis_mismatch", c.basis_mismatch},
              {"out_of_range", c.out_of_range},
              {"sync_prefix", c.sync_prefix},
              {"double_clicks", c.double_clicks}};
}

inline json to_json(const SyncReport& s) {
  const auto& sol = s.solution;
  return json{{"period", s.period.period},
              {"period_sharpness", s.period.sharpness},
              {"period_significance", s.period.significance},
              {"period_events_used", s.period.events_used},
              {"phase_center", sol.phase_center},
              {"offset_pulses", sol.offset_pulses},
              {"offset_estimate", sol.offset_estimate},
              {"correlation_score", sol.correlation_score},
              {"second_best_score", sol.second_best_score},
              {"noise_floor", sol.noise_floor},
              {"matched", sol.matched},
              {"acquisition_events", s.acquisition_events},
              {"acquisition_filtered", s.acquisition_filtered},
              {"tracked_shift", s.tracked_shift},
              {"success", sol.success}};
}

/// accounting.json: the run's own accounting with all intermediate bounds,
/// plus the same rates extrapolated to one key block.
inline json accounting_json(const RunReport& r) {
  json j = to_json(r.run);
  j["counts"] = to_json(r.table);
  j["extrapolated"] = to_json(r.extrapolated);
  j["extrapolated"]["scale_factor"] = r.extrapolation_factor;
  return j;
}

inline json report_json(const RunReport& r) {
  json j;
  j["status"] = r.status();
  j["seed"] = r.seed;
  j["params"] = to_json(r.params);
  j["raw_events"] = r.raw_events;
  j["filtered_events"] = r.filtered_events;
  j["sifting"] = to_json(r.counters);
  j["sifted_K"] = r.table.n_total(BasisId::K);
  j["sifted_C"] = r.table.n_total(BasisId::C);
  j["Q_K"] = r.Q_K;
  j["Q_C"] = r.Q_C;
  j["sifted_rate"] = r.sifted_rate;
  j["secret_length"] = r.run.accounting.secret_length;
  j["skr"] = r.run.accounting.skr;
  j["extrapolated_secret_length"] = r.extrapolated.accounting.secret_length;
  j["extrapolated_skr"] = r.extrapolated.accounting.skr;
  j["sync"] = to_json(r.sync);
  if (r.truth)
    j["ground_truth"] = json{{"vacuum_K", r.truth->vacuum_K},
                             {"single_K", r.truth->single_K},
                             {"single_C", r.truth->single_C},
                             {"single_C_errors", r.truth->single_C_errors}};
  j["runtime_s"] = r.runtime_s;
  return j;
}

inline void write_summary(std::ostream& out, const RunReport& r) {
  const auto& p = r.params;
  const auto& a = r.run.accounting;
  const auto& x = r.extrapolated.accounting;
  out << std::fixed;
  out << "status               " << r.status() << '\n';
  out << "seed                 " << r.seed << '\n';
  out << std::setprecision(3);
  out << "duration             " << p.duration << " s\n";
  out << "channel loss         " << p.channel_loss_db << " dB\n";
  out << "raw detections       " << r.raw_events << " (" << r.raw_events / p.duration << " /s)\n";
  out << "after time filter    " << r.filtered_events << '\n';
  out << "sifted K / C         " << r.table.n_total(BasisId::K) << " / " << r.table.n_total(BasisId::C) << '\n';
  out << std::setprecision(4);
  out << "QBER K / C           " << 100.0 * r.Q_K << " % / " << 100.0 * r.Q_C << " %\n";
  out << std::setprecision(12);
  out << "period               " << r.sync.period.period * 1e9 << " ns\n";
  out << std::setprecision(1);
  out << "phase center         " << r.sync.solution.phase_center * 1e12 << " ps\n";
  out << "offset               " << r.sync.solution.offset_pulses << " pulses\n";
  out << std::setprecision(4);
  out << "phase error bound    " << a.phi_K_up << '\n';
  out << std::setprecision(0);
  out << "secret bits (run)    " << a.secret_length << '\n';
  out << std::setprecision(1);
  out << "SKR (run)            " << a.skr << " bit/s\n";
  out << std::setprecision(0);
  out << "secret bits (" << p.key_block_duration << " s)  " << x.secret_length << '\n';
  out << std::setprecision(1);
  out << "SKR (extrapolated)   " << x.skr << " bit/s\n";
  out << std::setprecision(2);
  out << "runtime              " << r.runtime_s << " s\n";
}

inline void write_histogram_csv(const std::filesystem::path& path, const FoldedHistogram& h) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << "bin_center_ps,count\n" << std::setprecision(10);
  for (std::size_t b = 0; b < h.bins.size(); ++b) out << h.bin_center(b) * 1e12 << ',' << h.bins[b] << '\n';
}

inline void write_qber_csv(std::ostream& out, std::span<const SecondCounts> seconds) {
  out << "second,n_K,m_K,n_C,m_C\n";
  for (const auto& s : seconds) out << s.second << ',' << s.n_K << ',' << s.m_K << ',' << s.n_C << ',' << s.m_C << '\n';
}

inline void write_outputs(const RunReport& r, const StreamProcessor& proc, const std::filesystem::path& dir) {
  const auto open = [&](const char* name) {
    std::ofstream out(dir / name);
    if (!out) throw IoError("cannot write '" + (dir / name).string() + "'");
    return out;
  };
  write_histogram_csv(dir / "histogram.csv", proc.histogram());
  {
    auto out = open("qber_series.csv");
    write_qber_csv(out, proc.seconds());
  }
  open("accounting.json") << accounting_json(r).dump(2) << '\n';
  open("report.json") << report_json(r).dump(2) << '\n';
  {
    auto out = open("config.txt");
    write_config(out, r.params);
  }
  {
    auto out = open("summary.txt");
    write_summary(out, r);
  }
}

}  // namespace qkd

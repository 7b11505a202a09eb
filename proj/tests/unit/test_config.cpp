#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "flowmatch/config.hpp"
#include "flowmatch/plot.hpp"
#include "flowmatch/report.hpp"

using namespace flowmatch;

namespace {

ExperimentConfig from_text(const std::string& text, const std::vector<std::string>& overrides = {}) {
  std::istringstream in(text);
  auto tree = read_config_tree(in);
  apply_overrides(tree, overrides);
  ExperimentConfig c = experiment_from_tree(tree);
  validate(c);
  return c;
}

class ConfigTest : public ::testing::Test {
 protected:
  void SetUp() override { unsetenv("FLOWMATCH_SEED"); }
  void TearDown() override { unsetenv("FLOWMATCH_SEED"); }
};

}  // namespace

TEST_F(ConfigTest, DefaultsDescribeAnIcfmRun) {
  const ExperimentConfig c = from_text("");
  EXPECT_EQ(c.algorithm, Algorithm::icfm);
  EXPECT_EQ(c.source.spec.kind, DatasetKind::gaussian);
  EXPECT_EQ(c.target.spec.kind, DatasetKind::eight_gaussians);
  EXPECT_EQ(c.train.batch_size, 512u);
  EXPECT_EQ(c.train.hidden, (std::vector<std::size_t>{64, 64, 64}));
  EXPECT_DOUBLE_EQ(c.train.path.sigma, 0.1);
  EXPECT_DOUBLE_EQ(c.train.optimizer.lr, 1e-3);
  EXPECT_EQ(c.train.seed, 0u);
  EXPECT_EQ(c.tree.get<std::string>("seed"), "0");
}

TEST_F(ConfigTest, AlgorithmSelectsPathAndCoupling) {
  const ExperimentConfig ot = from_text("algorithm = otcfm\n");
  EXPECT_EQ(ot.train.path.variant, PathVariant::otcfm);
  EXPECT_EQ(ot.train.coupling, CouplingKind::exact_ot);
  const ExperimentConfig sb = from_text("algorithm = sbcfm\n[path]\nsigma = 0.5\n");
  EXPECT_EQ(sb.train.coupling, CouplingKind::entropic_ot);
  EXPECT_DOUBLE_EQ(sb.train.epsilon(), 0.5);
  const ExperimentConfig fm = from_text("algorithm = fm\n");
  EXPECT_EQ(fm.train.path.variant, PathVariant::fm_gaussian);
}

TEST_F(ConfigTest, OverridesWinOverFileValues) {
  const ExperimentConfig c = from_text("[train]\nbatch_size = 64\n", {"train.batch_size=128", "path.sigma = 0.3"});
  EXPECT_EQ(c.train.batch_size, 128u);
  EXPECT_DOUBLE_EQ(c.train.path.sigma, 0.3);
  EXPECT_THROW(from_text("", {"novalue"}), InvalidConfig);
}

TEST_F(ConfigTest, SeedPrecedence) {
  setenv("FLOWMATCH_SEED", "17", 1);
  EXPECT_EQ(from_text("").train.seed, 17u);
  EXPECT_EQ(from_text("seed = 4\n").train.seed, 4u);
  EXPECT_EQ(from_text("", {"seed=9"}).train.seed, 9u);
}

TEST_F(ConfigTest, ListsAndOptionalKeys) {
  const ExperimentConfig c = from_text(
      "[train]\nhidden = 8, 16\n[eval]\nintegrators = euler, dopri5\nnfe_grid = 2,4,8\n[coupling]\not_batch_size = 32\n");
  EXPECT_EQ(c.train.hidden, (std::vector<std::size_t>{8, 16}));
  EXPECT_EQ(c.eval.integrators, (std::vector<Method>{Method::euler, Method::dopri5}));
  EXPECT_EQ(c.eval.nfe_grid, (std::vector<std::size_t>{2, 4, 8}));
  EXPECT_EQ(c.train.ot_chunk(), 32u);
}

TEST_F(ConfigTest, RejectsBadConfigurations) {
  EXPECT_THROW(from_text("colour = blue\n"), InvalidConfig);
  EXPECT_THROW(from_text("[train]\nbatchsize = 3\n"), InvalidConfig);
  EXPECT_THROW(from_text("algorithm = gan\n"), InvalidConfig);
  EXPECT_THROW(from_text("algorithm = fm\n[source]\nkind = moons\n"), InvalidConfig);
  EXPECT_THROW(from_text("[source]\ndim = 3\n"), InvalidConfig);
  EXPECT_THROW(from_text("[train]\nbatch_size = -1\n"), InvalidConfig);
  EXPECT_THROW(from_text("[train]\nlr = abc\n"), InvalidConfig);
  EXPECT_THROW(from_text("[train]\nhidden = 8, 0\n"), InvalidConfig);
  EXPECT_THROW(from_text("algorithm = sbcfm\n[path]\nsigma = 0\n"), InvalidConfig);
  EXPECT_THROW(from_text("[eval]\nintegrators = leapfrog\n"), InvalidConfig);
  EXPECT_THROW(from_text("[path]\nsigma = -0.1\n"), InvalidConfig);
  std::istringstream broken("[train\nx=1\n");
  EXPECT_THROW(read_config_tree(broken), InvalidConfig);
  EXPECT_THROW(load_experiment("/nonexistent/config.ini"), IoError);
}

TEST_F(ConfigTest, ErrorMessagesNameTheField) {
  try {
    from_text("[train]\nbatch_size = 0\n");
    FAIL();
  } catch (const InvalidConfig& e) {
    EXPECT_NE(std::string(e.what()).find("train.batch_size"), std::string::npos);
  }
}

TEST_F(ConfigTest, CanonicalTextIsSortedAndStable) {
  const ExperimentConfig a = from_text("seed = 1\n[train]\nlr = 0.01\n[path]\nsigma = 0.2\n");
  const ExperimentConfig b = from_text("[path]\nsigma = 0.2\n[train]\nlr = 0.01\n", {"seed=1"});
  EXPECT_EQ(config_text(a.tree), config_text(b.tree));
  EXPECT_EQ(config_text(a.tree), "path.sigma = 0.2\nseed = 1\ntrain.lr = 0.01\n");
  EXPECT_EQ(config_json(a.tree)["train.lr"], "0.01");
}

TEST(Report, FormatDoubleRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, -2.5e17}) EXPECT_EQ(std::stod(format_double(v)), v);
  EXPECT_EQ(format_double(NAN), "nan");
}

TEST(Report, GitBlobSha1MatchesGit) {
  // Values from `git hash-object`.
  EXPECT_EQ(git_blob_sha1(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391");
  EXPECT_EQ(git_blob_sha1("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a");
}

TEST(Report, CsvRoundTrip) {
  ReportRow r;
  r.run_id = "a";
  r.algorithm = "otcfm";
  r.dataset = "8gaussians";
  r.sigma = 0.1;
  r.seed = 7;
  r.w2_sq = 1.0 / 3.0;
  r.pe = 2.5;
  r.npe = NAN;
  r.nfe_mean = 100;
  r.integrator = "rk4";
  r.n_steps = 25;
  const std::string text = report_csv({r, r});
  EXPECT_EQ(text.substr(0, text.find('\n')), "run_id,algorithm,dataset,sigma,seed,w2_sq,pe,npe,nfe_mean,integrator,n_steps");
  std::istringstream in(text);
  const auto rows = parse_report_csv(in);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].w2_sq, r.w2_sq);
  EXPECT_TRUE(std::isnan(rows[1].npe));
  EXPECT_EQ(rows[1].seed, 7u);
  EXPECT_EQ(rows[1].n_steps, 25u);
  EXPECT_EQ(report_csv(rows), text);
}

TEST(Report, ParseErrorsCarryPositions) {
  std::istringstream bad_header("run_id,algorithm\n");
  EXPECT_THROW(parse_report_csv(bad_header), ParseError);
  std::istringstream bad_cell(
      "run_id,algorithm,dataset,sigma,seed,w2_sq,pe,npe,nfe_mean,integrator,n_steps\n"
      "a,icfm,moons,0.1,0,x,1,1,1,rk4,1\n");
  try {
    parse_report_csv(bad_cell);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row(), 2u);
    EXPECT_EQ(e.column(), 6u);
  }
  std::istringstream negative(
      "run_id,algorithm,dataset,sigma,seed,w2_sq,pe,npe,nfe_mean,integrator,n_steps\n"
      "a,icfm,moons,0.1,-1,0,1,1,1,rk4,1\n");
  EXPECT_THROW(parse_report_csv(negative), ParseError);
}

TEST(Report, HistoryCsvIsDeterministicText) {
  std::vector<HistoryRow> h{{10, 0.5, 0.25, 1.5}, {20, 0.125, NAN, 3.0}};
  EXPECT_EQ(history_csv(h), "epoch,train_loss,val_loss\n10,0.5,0.25\n20,0.125,nan\n");
  EXPECT_EQ(timing_csv(h), "epoch,elapsed_s\n10,1.5\n20,3\n");
}

TEST(Plot, TrajectoryCsvRoundTrip) {
  FlowPicture pic;
  pic.source = Matrix{{0.0, 1.0}, {2.0, 3.0}};
  pic.target = Matrix{{4.0, 5.0}};
  pic.trajectories = {Matrix{{0.0, 0.0}, {0.5, 0.5}, {1.0, 1.0}}, Matrix{{1.0, 0.0}, {1.0, 1.0}, {1.0, 2.0}}};
  const std::string text = trajectory_csv(pic);
  std::istringstream in(text);
  const FlowPicture back = parse_trajectory_csv(in);
  EXPECT_EQ(back.source.values(), pic.source.values());
  EXPECT_EQ(back.target.values(), pic.target.values());
  ASSERT_EQ(back.trajectories.size(), 2u);
  EXPECT_EQ(back.trajectories[1].values(), pic.trajectories[1].values());
  EXPECT_EQ(trajectory_csv(back), text);
}

TEST(Plot, FlowSvgHasOnePolylinePerTrajectory) {
  FlowPicture pic;
  pic.source = Matrix{{0.0, 0.0}};
  pic.target = Matrix{{1.0, 1.0}};
  pic.trajectories = {Matrix{{0.0, 0.0}, {1.0, 1.0}}, Matrix{{0.0, 1.0}, {1.0, 0.0}}, Matrix{{0.5, 0.5}, {0.5, 0.5}}};
  const std::string svg = render_flow_svg(pic);
  std::size_t count = 0;
  for (std::size_t p = svg.find("<polyline"); p != std::string::npos; p = svg.find("<polyline", p + 1)) ++count;
  EXPECT_EQ(count, 3u);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_EQ(render_flow_svg(pic), svg);
}

TEST(Plot, MetricSvgDrawsEachSeries) {
  const std::string svg = render_metric_svg({{"a", {{1, 2}, {2, 1}}}, {"b", {{1, 3}, {4, 0.5}}}}, "nfe", "w2");
  EXPECT_NE(svg.find(">a<"), std::string::npos);
  EXPECT_NE(svg.find(">b<"), std::string::npos);
}

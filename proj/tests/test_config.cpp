#include <gtest/gtest.h>

#include "atcon/config.hpp"

using namespace atcon;

TEST(Config, DefaultsRoundTrip) {
  const RunConfig defaults;
  EXPECT_EQ(parse_config(emit_config(defaults)), defaults);
  EXPECT_EQ(parse_config(config_reference()), defaults);
}

TEST(Config, EveryKeyRoundTrips) {
  const std::string text =
      "seed = 9\nclasses=4\nvideos_per_class=10\nframes=6\nframe_dim=3\nshift_severity=0.25\nnoise_std=0.2\n"
      "d_enc=7\nd=5\nd_b=4\nclips_per_scale=2\nencoder_hidden=9\nrelation_hidden=11\n"
      "lambda=0.01\nalpha_local=0.5\nalpha_overall=0.25\nbeta_fc=2\nbeta_pc=0.1\nbeta_tc=3\nbeta_im=0.7\n"
      "beta_ce=0.2\neps_norm=1e-4\neps_smooth=0.05\nlr_source=0.02\nlr_adapt=0.002\nmomentum=0.8\n"
      "weight_decay=0.0001\nepochs_source=4\nepochs_adapt=3\nbatch_size=16\npl_rounds=2\nthreads=2\n"
      "variant=pc_no_overall\nfreeze_scope=last_layer_only\nconfidence=raw\nweight_target=probabilities\n"
      "kl_mode=literal\noverall_pc_weighted=false\n";
  const auto cfg = parse_config(text);
  EXPECT_EQ(cfg.seed, 9u);
  EXPECT_EQ(cfg.data.seed, 9u);
  EXPECT_EQ(cfg.model.M_max, 2u);
  EXPECT_EQ(cfg.loss.beta_tc, 3.0);
  EXPECT_EQ(cfg.variant, Variant::pc_no_overall);
  EXPECT_EQ(cfg.kl_mode, KlMode::literal);
  EXPECT_FALSE(cfg.overall_pc_weighted);
  EXPECT_EQ(parse_config(emit_config(cfg)), cfg);
  EXPECT_NE(cfg, RunConfig{});
}

TEST(Config, CommentsBlanksAndSpacing) {
  const auto cfg = parse_config("# comment\n\n   epochs_adapt   =   7   \n");
  EXPECT_EQ(cfg.epochs_adapt, 7u);
}

TEST(Config, ErrorsNameKeyAndLine) {
  try {
    parse_config("epochs_adapt = 3\nbogus = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("config:2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("unknown config key 'bogus'"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_config("batch_size = many\n"), ConfigError);
  EXPECT_THROW(parse_config("variant = everything\n"), ConfigError);
  EXPECT_THROW(parse_config("no equals sign\n"), ConfigError);
  EXPECT_THROW(parse_config("overall_pc_weighted = maybe\n"), ConfigError);
  EXPECT_THROW(parse_config("batch_size = 1\n"), Error);
}

TEST(Config, DoublesSurviveExactly) {
  RunConfig cfg;
  cfg.loss.lambda = 0.1 + 0.2;
  EXPECT_EQ(parse_config(emit_config(cfg)).loss.lambda, cfg.loss.lambda);
}

#pragma once
// Classic cartpole balancing environment: closed-form dynamics with Euler
// integration. Reward 1 per surviving step; episode ends when the cart or
// pole leaves its bounds or max_steps is reached.
#include <cmath>

#include "ckptdiff/rng.hpp"

namespace ckptdiff {

struct CartpoleEnv {
  double gravity = 9.8;
  double masscart = 1.0;
  double masspole = 0.1;
  double half_length = 0.5;
  double force_mag = 10.0;
  double tau = 0.02;
  double x_limit = 2.4;
  double theta_limit_rad = 12.0 * M_PI / 180.0;
  long max_steps = 500;

  struct State {
    double x = 0, xdot = 0, theta = 0, thetadot = 0;
  };
  State s;

  void reset(Rng& rng) {
    s.x = rng.uniform(-0.05, 0.05);
    s.xdot = rng.uniform(-0.05, 0.05);
    s.theta = rng.uniform(-0.05, 0.05);
    s.thetadot = rng.uniform(-0.05, 0.05);
  }

  // action: 0 pushes left, 1 pushes right. Returns true when the episode is
  // over (pole fell or cart left the track).
  bool step(int action) {
    double force = action == 1 ? force_mag : -force_mag;
    double total_mass = masscart + masspole;
    double pml = masspole * half_length;
    double costh = std::cos(s.theta), sinth = std::sin(s.theta);
    double temp = (force + pml * s.thetadot * s.thetadot * sinth) / total_mass;
    double thacc = (gravity * sinth - costh * temp) /
                   (half_length * (4.0 / 3.0 - masspole * costh * costh / total_mass));
    double xacc = temp - pml * thacc * costh / total_mass;
    s.x += tau * s.xdot;
    s.xdot += tau * xacc;
    s.theta += tau * s.thetadot;
    s.thetadot += tau * thacc;
    return std::abs(s.x) > x_limit || std::abs(s.theta) > theta_limit_rad;
  }
};

}  // namespace ckptdiff

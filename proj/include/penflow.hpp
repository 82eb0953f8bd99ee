#pragma once

#include "penflow/problem.hpp"
#include "penflow/flow.hpp"
#include "penflow/kkt.hpp"
#include "penflow/integrator.hpp"
#include "penflow/io.hpp"
#include "penflow/qp.hpp"
#include "penflow/mpc.hpp"
#include "penflow/binary.hpp"

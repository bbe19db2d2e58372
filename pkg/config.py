import os

from dotenv import load_dotenv

basedir = os.path.abspath(os.path.dirname(__file__))
load_dotenv(os.path.join(basedir, '.env'))


class Config:
    # Run settings; config key 'train.batch_size' reads TRAIN_BATCH_SIZE
    PROBLEM_NAME = 'example1'
    PROBLEM_D = None
    PROBLEM_T = 1.0
    PROBLEM_DELTA = 1.0
    PROBLEM_MARK_MODE = 'aggregate'
    PROBLEM_QUAD_ORDER = 32

    GRID_N = 20
    GRID_N_LIST = '10,20,40,80'

    TRAIN_ITERATIONS = 4000
    TRAIN_BATCH_SIZE = 256
    TRAIN_LR = 1e-3
    TRAIN_BETA1 = 0.9
    TRAIN_BETA2 = 0.999
    TRAIN_EPS = 1e-8
    TRAIN_OPTIMIZER = 'adam'
    TRAIN_LR_DECAY = 1.0
    TRAIN_LR_DECAY_EVERY = 1000
    TRAIN_CHECKPOINT_EVERY = 100
    TRAIN_HIDDEN = ''  # empty: two layers of width d + 10
    TRAIN_ACTIVATION = 'relu'
    TRAIN_NETWORK_MODE = 'per_step'
    TRAIN_Y0_INIT = 'terminal'
    TRAIN_DRIVER_MODE = 'explicit'
    TRAIN_IMPLICIT_ITERATIONS = 5
    TRAIN_EVAL_SAMPLES = 256

    MARKOVIAN_SCHEME = 'regression'
    MARKOVIAN_SAMPLES = 20000
    MARKOVIAN_BASIS = 'polynomial'
    MARKOVIAN_DEGREE = 4
    MARKOVIAN_KNOTS = 8
    MARKOVIAN_MAX_SWEEPS = 20
    MARKOVIAN_TOL = 1e-3
    MARKOVIAN_EVAL_POINTS = 200

    RATE_MODE = 'oracle'
    RATE_SAMPLES = 100000

    ERRORS_SOURCE = 'oracle'
    ERRORS_SAMPLES = 10000
    ERRORS_PARAMS = ''

    OUTPUT_DIR = os.environ.get('FBSDEJ_OUTPUT_DIR') or os.path.join(basedir, 'instance', 'runs')
    SEED = int(os.environ.get('FBSDEJ_SEED') or 0)
    RUNS = 1
    DETERMINISM = 'strict'

    # None: audit.db inside the run's output directory
    AUDIT_DATABASE_URI = os.environ.get('DATABASE_URL')


class TestConfig(Config):
    TESTING = True
    GRID_N = 5
    GRID_N_LIST = '4,8,16'
    TRAIN_ITERATIONS = 20
    TRAIN_BATCH_SIZE = 32
    TRAIN_CHECKPOINT_EVERY = 5
    TRAIN_EVAL_SAMPLES = 32
    MARKOVIAN_SAMPLES = 2000
    MARKOVIAN_MAX_SWEEPS = 3
    RATE_SAMPLES = 500
    ERRORS_SAMPLES = 200
    SEED = 0
    AUDIT_DATABASE_URI = 'sqlite:///:memory:'

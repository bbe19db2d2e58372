from wtforms import FloatField, Form, IntegerField, StringField
from wtforms.validators import AnyOf, NumberRange, Optional, ValidationError

from fbsdej.analysis import MODE_ALIASES, RATE_MODES
from fbsdej.deep_solver import DRIVER_MODES, OPTIMIZERS, Y0_INITS
from fbsdej.markovian import BASIS_KINDS
from fbsdej.net import ACTIVATIONS, NETWORK_MODES
from fbsdej.problem import MARK_MODES, PROBLEMS
from fbsdej.stochastic_kernel import NOISE_MODES

MARKOVIAN_SCHEMES = ('regression', 'quadrature')
ERROR_SOURCES = ('oracle', 'params', 'markovian', 'markovian_quadrature')


def field_name(key):
    """Config key 'train.batch_size' -> form field 'train_batch_size'."""
    return key.replace('.', '_')


def parse_int_list(text):
    return [int(part) for part in str(text).split(',') if part.strip()]


class FlatKeys(dict):
    """Flat config values exposed the way WTForms reads form data."""

    def getlist(self, key):
        return [self[key]] if key in self else []


class RunConfigForm(Form):
    problem_name = StringField('problem.name', validators=[Optional(), AnyOf(sorted(PROBLEMS))])
    problem_d = IntegerField('problem.d', validators=[Optional(), NumberRange(min=1)])
    problem_t = FloatField('problem.t', validators=[Optional(), NumberRange(min=1e-12)])
    problem_delta = FloatField('problem.delta', validators=[Optional(), NumberRange(min=1e-12)])
    problem_mark_mode = StringField('problem.mark_mode', validators=[Optional(), AnyOf(MARK_MODES)])
    problem_quad_order = IntegerField('problem.quad_order', validators=[Optional(), NumberRange(min=2, max=512)])

    grid_n = IntegerField('grid.n', validators=[Optional(), NumberRange(min=1)])
    grid_n_list = StringField('grid.n_list', validators=[Optional()])

    train_iterations = IntegerField('train.iterations', validators=[Optional(), NumberRange(min=0)])
    train_batch_size = IntegerField('train.batch_size', validators=[Optional(), NumberRange(min=2)])
    train_lr = FloatField('train.lr', validators=[Optional(), NumberRange(min=1e-12)])
    train_beta1 = FloatField('train.beta1', validators=[Optional(), NumberRange(min=0.0, max=0.999999)])
    train_beta2 = FloatField('train.beta2', validators=[Optional(), NumberRange(min=0.0, max=0.999999999)])
    train_eps = FloatField('train.eps', validators=[Optional(), NumberRange(min=0.0)])
    train_optimizer = StringField('train.optimizer', validators=[Optional(), AnyOf(OPTIMIZERS)])
    train_lr_decay = FloatField('train.lr_decay', validators=[Optional(), NumberRange(min=1e-12, max=1.0)])
    train_lr_decay_every = IntegerField('train.lr_decay_every', validators=[Optional(), NumberRange(min=1)])
    train_checkpoint_every = IntegerField('train.checkpoint_every', validators=[Optional(), NumberRange(min=1)])
    train_hidden = StringField('train.hidden', validators=[Optional()])
    train_activation = StringField('train.activation', validators=[Optional(), AnyOf(ACTIVATIONS)])
    train_network_mode = StringField('train.network_mode', validators=[Optional(), AnyOf(NETWORK_MODES)])
    train_y0_init = StringField('train.y0_init', validators=[Optional(), AnyOf(Y0_INITS)])
    train_driver_mode = StringField('train.driver_mode', validators=[Optional(), AnyOf(DRIVER_MODES)])
    train_implicit_iterations = IntegerField('train.implicit_iterations', validators=[Optional(), NumberRange(min=1)])
    train_eval_samples = IntegerField('train.eval_samples', validators=[Optional(), NumberRange(min=2)])

    markovian_scheme = StringField('markovian.scheme', validators=[Optional(), AnyOf(MARKOVIAN_SCHEMES)])
    markovian_samples = IntegerField('markovian.samples', validators=[Optional(), NumberRange(min=10)])
    markovian_basis = StringField('markovian.basis', validators=[Optional(), AnyOf(BASIS_KINDS)])
    markovian_degree = IntegerField('markovian.degree', validators=[Optional(), NumberRange(min=1, max=12)])
    markovian_knots = IntegerField('markovian.knots', validators=[Optional(), NumberRange(min=2)])
    markovian_max_sweeps = IntegerField('markovian.max_sweeps', validators=[Optional(), NumberRange(min=1)])
    markovian_tol = FloatField('markovian.tol', validators=[Optional(), NumberRange(min=0.0)])
    markovian_eval_points = IntegerField('markovian.eval_points', validators=[Optional(), NumberRange(min=1)])

    rate_mode = StringField('rate.mode', validators=[Optional(), AnyOf(RATE_MODES + tuple(MODE_ALIASES))])
    rate_samples = IntegerField('rate.samples', validators=[Optional(), NumberRange(min=2)])

    errors_source = StringField('errors.source', validators=[Optional(), AnyOf(ERROR_SOURCES)])
    errors_samples = IntegerField('errors.samples', validators=[Optional(), NumberRange(min=2)])
    errors_params = StringField('errors.params', validators=[Optional()])

    output_dir = StringField('output_dir', validators=[Optional()])
    seed = IntegerField('seed', validators=[Optional(), NumberRange(min=0)])
    runs = IntegerField('runs', validators=[Optional(), NumberRange(min=1)])
    determinism = StringField('determinism', validators=[Optional(), AnyOf(NOISE_MODES)])

    def validate_grid_n_list(self, field):
        try:
            levels = parse_int_list(field.data)
        except ValueError:
            raise ValidationError('grid.n_list must be a comma-separated list of integers.')
        if min(levels, default=0) < 1:
            raise ValidationError('grid.n_list entries must be positive.')
        if len(set(levels)) < 3:
            raise ValidationError('grid.n_list needs at least 3 distinct step counts.')

    def validate_train_hidden(self, field):
        try:
            widths = parse_int_list(field.data)
        except ValueError:
            raise ValidationError('train.hidden must be a comma-separated list of integers.')
        if any(w < 1 for w in widths):
            raise ValidationError('train.hidden widths must be positive.')


CONFIG_KEYS = tuple(field.label.text for field in RunConfigForm())

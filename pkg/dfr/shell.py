#!/usr/bin/env python3

# Command line surface.  Each command is a ``command_NAME`` method whose
# docstring first line is ``usage: description``, and which gets the
# remaining arguments as a list.

from __future__ import annotations

import argparse
import logging
import os
import sys
import textwrap
from typing import TextIO

import numpy as np

from . import Error, InputError, NonFiniteEnergyError, NumericalError, __version__
from . import ext
from .config import RegistrationConfig, apply_overrides, config_keys, load_config, to_text
from .defgraph import qslim_decimate
from .fmaps import diagnose, load_features
from .geometry import geodesic_matrix, load_shape, normalize_shape, save_shape, surface_area
from .pipeline import (align_input, geodesic_error, load_manifest, load_map, load_rotation, match_through_template,
                       prepare_target, run_batch, save_map)
from .registration import register
from .spectral import mesh_basis
from .trace import print_runtime

log = logging.getLogger(__name__)


class _ArgumentParser(argparse.ArgumentParser):
    "Raises instead of exiting so the shell picks the exit code"

    out: TextIO | None = None

    def _print_message(self, message: str, file: TextIO | None = None) -> None:
        if message:
            (self.out or file or sys.stderr).write(message)

    def error(self, message: str):
        raise Shell.Error(f"{ self.prog }: { message }")


class Shell:
    """Runs registration, matching, evaluation and preprocessing commands

    :param stdout: Where normal output goes, default ``sys.stdout``
    :param stderr: Where messages and errors go, default ``sys.stderr``

    .. code-block::

        shell = Shell()
        code = shell.run(["register", "template.off", "scan.ply", "--output", "out"])
    """

    class Error(Exception):
        """Raised for command line usage problems.  The message is shown to
        the user and the exit code is 2."""
        pass

    def __init__(self, stdout: TextIO | None = None, stderr: TextIO | None = None):
        self.stdout = stdout or sys.stdout
        self.stderr = stderr or sys.stderr
        self.exceptions = False
        "Print tracebacks with the values of local variables"
        self.log_level = logging.WARNING
        self._help_info: dict[str, tuple[str, str, str]] | None = None

    def write(self, dest: TextIO, text: str) -> None:
        dest.write(text)

    def commands(self) -> list[str]:
        "Command names as typed, eg ``fmap-diagnose``"
        return sorted(c[len("command_"):].replace("_", "-") for c in dir(self) if c.startswith("command_"))

    def run(self, argv: list[str]) -> int:
        """Runs one command

        Options before the command name are ``--exceptions``, ``--verbose``,
        ``--debug`` and ``--version``.

        :returns: Exit code, 0 on success, 2 for input errors and 3 for
           numerical failures
        """
        argv = list(argv)
        while argv and argv[0].startswith("-"):
            opt = argv.pop(0)
            if opt == "--exceptions":
                self.exceptions = True
            elif opt in ("-v", "--verbose"):
                self.log_level = logging.INFO
            elif opt == "--debug":
                self.log_level = logging.DEBUG
            elif opt == "--version":
                self.write(self.stdout, f"dfr { __version__ }\n")
                return 0
            elif opt in ("-h", "--help"):
                argv = ["help"]
            else:
                self.write(self.stderr, f"Unknown option { opt }\n")
                return 2
        if not argv:
            argv = ["help"]
        name, args = argv[0], argv[1:]
        method = getattr(self, "command_" + name.replace("-", "_"), None)
        if method is None:
            self.write(self.stderr, f"Unknown command '{ name }'.  Commands are { ', '.join(self.commands()) }\n")
            return 2

        handler = ext.configure_logging(self.log_level, stream=self.stderr, show_extra=self.log_level <= logging.INFO)
        try:
            method(args)
            return 0
        except SystemExit as exc:
            # argparse --help
            return exc.code if isinstance(exc.code, int) else 0
        except Exception:
            return self.handle_exception()
        finally:
            logging.getLogger("dfr").removeHandler(handler)

    def handle_exception(self) -> int:
        """Shows the current exception and picks the exit code for it"""
        eclass, evalue, etb = sys.exc_info()
        if self.exceptions:
            ext.print_augmented_traceback(eclass, evalue, etb, file=self.stderr)
        text = str(evalue)
        if isinstance(evalue, NonFiniteEnergyError) and evalue.iteration is not None:
            text += f" (iteration { evalue.iteration }, { len(evalue.trace or []) } trace rows kept)"
        if not text.endswith("\n"):
            text += "\n"
        self.write(self.stderr, f"{ eclass.__name__ }: { text }")
        if isinstance(evalue, (InputError, Shell.Error, OSError)):
            return 2
        if isinstance(evalue, NumericalError):
            return 3
        if not isinstance(evalue, Error) and not self.exceptions:
            self.write(self.stderr, "Use --exceptions to see where this came from\n")
        return 1

    def _parser(self, name: str, *, config: bool = False) -> _ArgumentParser:
        "A parser for a command, with the registration settings as flags when `config` is true"
        method = getattr(self, "command_" + name.replace("-", "_"))
        usage, description, _ = self._help(method.__doc__)
        parser = _ArgumentParser(prog=f"dfr { name }", usage=f"dfr { usage } [options]", description=description)
        parser.out = self.stdout
        if config:
            parser.add_argument("--config", metavar="FILE", help="Read settings from FILE, flags override it")
            group = parser.add_argument_group("registration settings")
            for key in config_keys():
                group.add_argument(key.flag,
                                   dest=key.dest,
                                   default=None,
                                   metavar=key.type.__name__.upper(),
                                   help=f"[{ to_text_value(key.default) }]")
        return parser

    def _config(self, options: argparse.Namespace) -> RegistrationConfig:
        config = load_config(options.config) if options.config else RegistrationConfig()
        overrides = {}
        for key in config_keys():
            value = getattr(options, key.dest)
            if value is not None:
                overrides[(key.section, key.name)] = value
        return apply_overrides(config, overrides).validate()

    def _help(self, doc: str) -> tuple[str, str, str]:
        doc = doc.lstrip("\n")
        first, _, rest = doc.partition("\n")
        usage, sep, description = first.partition(":")
        assert sep, "command docstrings must start with 'usage: description'"
        return usage.strip(), description.strip(), textwrap.dedent(rest).strip()

    def command_help(self, cmd: list[str]) -> None:
        """help ?COMMAND?: Shows the commands and their usage

        With a COMMAND name shows its detailed description.  Every command
        also accepts ``--help`` for its full list of options.
        """
        if self._help_info is None:
            self._help_info = {c: self._help(getattr(self, "command_" + c.replace("-", "_")).__doc__)
                               for c in self.commands()}
        if cmd:
            for c in cmd:
                if c not in self._help_info:
                    raise self.Error(f"No such command '{ c }'")
                usage, description, detail = self._help_info[c]
                self.write(self.stdout, f"{ usage }: { description }\n")
                if detail:
                    self.write(self.stdout, "\n" + textwrap.indent(detail, "  ") + "\n")
            return
        width = max(len(u) for u, _, _ in self._help_info.values())
        self.write(self.stdout, "usage: dfr [--exceptions] [--verbose] COMMAND ...\n\n")
        for c in self.commands():
            usage, description, _ = self._help_info[c]
            self.write(self.stdout, f"  { usage.ljust(width) }  { description }\n")

    def command_register(self, cmd: list[str]) -> None:
        """register SOURCE TARGET --output DIR: Deforms the SOURCE mesh onto the TARGET shape

        SOURCE is normalized and TARGET centered and rotated (by ``--rotation``
        or the ``align`` setting) before registering.  DIR receives the
        deformed mesh, both nearest neighbour maps, the energy trace and the
        settings used.  Without ``--features`` the first stage is skipped.
        """
        parser = self._parser("register", config=True)
        parser.add_argument("source")
        parser.add_argument("target")
        parser.add_argument("--output", required=True, metavar="DIR")
        parser.add_argument("--features", nargs=2, metavar=("SOURCE_FEATURES", "TARGET_FEATURES"))
        parser.add_argument("--rotation", metavar="FILE", help="3 x 3 rotation the target was posed with")
        options = parser.parse_args(cmd)
        config = self._config(options)

        source, source_transform = normalize_shape(load_shape(options.source, "mesh"), config.normalize)
        rotation = load_rotation(options.rotation) if options.rotation else None
        target, _ = prepare_target(load_shape(options.target, "auto"), config, rotation=rotation,
                                   template_scale=source_transform.scale)
        features = None
        if options.features:
            features = (load_features(options.features[0], source.name, points=source.n_vertices),
                        load_features(options.features[1], target.name, points=len(target.vertices)))

        result = register(source, target, features, config)

        os.makedirs(options.output, exist_ok=True)
        save_shape(result.deformed, os.path.join(options.output, "deformed.ply"))
        save_map(result.pi_st, os.path.join(options.output, "map_st.txt"), source=source.name, target=target.name)
        save_map(result.pi_ts, os.path.join(options.output, "map_ts.txt"), source=target.name, target=source.name)
        result.trace.save(os.path.join(options.output, "trace.csv"))
        with open(os.path.join(options.output, "config.ini"), "wt", encoding="utf8") as f:
            f.write(to_text(config))
        print_runtime(result.runtimes, self.stdout)

    def command_match(self, cmd: list[str]) -> None:
        """match TEMPLATE TARGET1 TARGET2 --output FILE: Maps TARGET1 points to TARGET2 through the TEMPLATE

        Both targets are registered to the template and the two maps
        composed, so every pair of a collection only needs registrations to
        one shape.  Targets are aligned with ``--rotation1`` and
        ``--rotation2`` when given, otherwise by the ``align`` setting.
        """
        parser = self._parser("match", config=True)
        parser.add_argument("template")
        parser.add_argument("target1")
        parser.add_argument("target2")
        parser.add_argument("--output", required=True, metavar="FILE")
        parser.add_argument("--features", nargs=3, metavar=("TEMPLATE_FEATURES", "FEATURES1", "FEATURES2"))
        parser.add_argument("--rotation1", metavar="FILE", help="3 x 3 rotation TARGET1 was posed with")
        parser.add_argument("--rotation2", metavar="FILE", help="3 x 3 rotation TARGET2 was posed with")
        options = parser.parse_args(cmd)
        config = self._config(options)

        template, template_transform = normalize_shape(load_shape(options.template, "mesh"), config.normalize)
        t1, t2 = (prepare_target(load_shape(path, "auto"),
                                 config,
                                 rotation=load_rotation(rotation) if rotation else None,
                                 template_scale=template_transform.scale)[0]
                  for path, rotation in ((options.target1, options.rotation1), (options.target2, options.rotation2)))
        features = None
        if options.features:
            features = tuple(
                load_features(path, shape.name, points=len(shape.vertices))
                for path, shape in zip(options.features, (template, t1, t2)))
        t_12, _, _ = match_through_template(template, t1, t2, features, config)
        save_map(t_12, options.output, source=t1.name, target=t2.name)

    def command_eval(self, cmd: list[str]) -> None:
        """eval PREDICTION TRUTH TARGET: Mean geodesic error of a predicted map

        PREDICTION and TRUTH are map files onto the vertices of the TARGET
        mesh.  Only source indices present in both are measured, so sparse
        landmark ground truth works.  The error is normalized by the square
        root of the target area and shown times 100.
        """
        parser = self._parser("eval")
        parser.add_argument("prediction")
        parser.add_argument("truth")
        parser.add_argument("target")
        options = parser.parse_args(cmd)

        pred = load_map(options.prediction)
        truth = load_map(options.truth)
        target = load_shape(options.target, "mesh")
        _, ip, it = np.intersect1d(pred[:, 0], truth[:, 0], return_indices=True)
        if not len(ip):
            raise InputError("prediction and truth have no source indices in common")
        stats = geodesic_error(pred[ip, 1], truth[it, 1], geodesic_matrix(target), surface_area(target))
        self.write(self.stdout, ext.format_table(["error x100", "points", "excluded"],
                                                 [[stats.percent, stats.count, stats.excluded]]))

    def command_fmap_diagnose(self, cmd: list[str]) -> None:
        """fmap-diagnose MESH1 MESH2 FEATURES1 FEATURES2: Prints functional map losses for a shape pair

        Computes the regularized functional maps in both directions from the
        feature files, then the bijectivity, orthogonality, alignment,
        contrastive and combined losses.
        """
        parser = self._parser("fmap-diagnose")
        parser.add_argument("mesh1")
        parser.add_argument("mesh2")
        parser.add_argument("features1")
        parser.add_argument("features2")
        parser.add_argument("--k", type=int, default=50, help="Eigenfunctions per shape [%(default)s]")
        parser.add_argument("--lambda-reg", type=float, default=1e-3, help="Laplacian commutativity weight [%(default)s]")
        parser.add_argument("--alpha", type=float, default=100.0, help="Soft map sharpness [%(default)s]")
        parser.add_argument("--gamma", type=float, default=0.07, help="Contrastive temperature [%(default)s]")
        parser.add_argument("--second", nargs=2, metavar=("G1", "G2"), help="Second embeddings for the contrastive term")
        options = parser.parse_args(cmd)

        m1 = load_shape(options.mesh1, "mesh")
        m2 = load_shape(options.mesh2, "mesh")
        f1 = load_features(options.features1, m1.name, points=m1.n_vertices)
        f2 = load_features(options.features2, m2.name, points=m2.n_vertices)
        g1 = g2 = None
        if options.second:
            g1 = load_features(options.second[0], m1.name, points=m1.n_vertices)
            g2 = load_features(options.second[1], m2.name, points=m2.n_vertices)
        d = diagnose(f1, f2, mesh_basis(m1, options.k), mesh_basis(m2, options.k),
                     G1=g1, G2=g2, lambda_reg=options.lambda_reg, alpha=options.alpha, gamma=options.gamma)
        rows = [["bijectivity", d.losses.e_bij], ["orthogonality", d.losses.e_ortho],
                ["alignment", d.losses.e_align], ["alignment (unsquared)", d.losses.e_align_unsquared],
                ["functional map total", d.losses.e_dfm], ["contrastive", d.nce], ["combined", d.combined]]
        self.write(self.stdout, ext.format_table(["loss", "value"], rows))

    def command_decimate(self, cmd: list[str]) -> None:
        """decimate MESH COUNT OUTPUT: Simplifies a mesh to COUNT vertices by quadric error edge collapses

        The surviving vertices keep their input positions.  A sidecar
        OUTPUT.idx lists for each output vertex its index in MESH.
        """
        parser = self._parser("decimate")
        parser.add_argument("mesh")
        parser.add_argument("count", type=int)
        parser.add_argument("output")
        parser.add_argument("--order", choices=("quadric", "random"), default="quadric")
        parser.add_argument("--seed", type=int, default=0, help="Seed for random order [%(default)s]")
        options = parser.parse_args(cmd)

        result = qslim_decimate(load_shape(options.mesh, "mesh"), options.count, order=options.order, seed=options.seed)
        save_shape(result.mesh, options.output)
        np.savetxt(options.output + ".idx", result.survivors, fmt="%d")
        if result.stalled:
            self.write(self.stderr, f"Stopped at { result.mesh.n_vertices } vertices, no valid collapse remained\n")
        self.write(self.stdout, f"{ result.mesh.n_vertices } vertices, { len(result.mesh.faces) } faces\n")

    def command_geodesics(self, cmd: list[str]) -> None:
        """geodesics MESH OUTPUT: Writes the all pairs geodesic distance cache for a mesh

        Distances are shortest paths over the edge graph.  Vertices in
        different components are infinitely far apart.
        """
        parser = self._parser("geodesics")
        parser.add_argument("mesh")
        parser.add_argument("output")
        parser.add_argument("--threads", type=int, default=0, help="Worker threads, 0 for all cores [%(default)s]")
        options = parser.parse_args(cmd)

        mesh = load_shape(options.mesh, "mesh")
        geo = geodesic_matrix(mesh, mode="dense", threads=options.threads)
        geo.save(options.output)
        finite = geo.dense[np.isfinite(geo.dense)]
        self.write(self.stdout, f"{ geo.n } vertices, diameter { float(finite.max()):.6g}\n")

    def command_align(self, cmd: list[str]) -> None:
        """align SHAPE OUTPUT: Centers a shape and rotates it into the canonical frame

        With ``--rotation`` the transpose of the given rotation is applied,
        otherwise ``--mode pca`` puts the principal axes on the coordinate
        axes and ``--mode none`` only centers.  The applied rotation is
        printed.
        """
        parser = self._parser("align")
        parser.add_argument("shape")
        parser.add_argument("output")
        parser.add_argument("--mode", choices=("none", "pca"), default="pca")
        parser.add_argument("--rotation", metavar="FILE")
        options = parser.parse_args(cmd)

        shape = load_shape(options.shape, "auto")
        if options.rotation:
            aligned, transform = align_input(shape, "rotation_file", load_rotation(options.rotation))
        else:
            aligned, transform = align_input(shape, options.mode)
        save_shape(aligned, options.output)
        np.savetxt(self.stdout, transform.rotation, fmt="%.17g")

    def command_batch(self, cmd: list[str]) -> None:
        """batch MANIFEST: Registers a template to every target of a manifest and evaluates the maps

        Writes per target directories, ``report.json`` and ``runtime.json``
        under the manifest's output directory.  Failed targets are reported
        and the rest continue.  Settings come from the manifest's config
        file, then ``--config``, then flags.
        """
        parser = self._parser("batch", config=True)
        parser.add_argument("manifest")
        parser.add_argument("--workers", type=int, default=None, help="Override the manifest worker count")
        options = parser.parse_args(cmd)

        manifest = load_manifest(options.manifest)
        if options.workers is not None:
            manifest.workers = options.workers
        if not options.config and manifest.config:
            options.config = manifest.config
        report = run_batch(manifest, self._config(options))

        rows = [[t.name, t.status, t.chamfer, t.message] for t in report.targets]
        self.write(self.stdout, ext.format_table(["target", "status", "chamfer", "message"], rows))
        if report.pairs:
            rows = [[p.source, p.target, p.error, p.initial_error, p.count, p.excluded] for p in report.pairs]
            self.write(self.stdout,
                       ext.format_table(["source", "target", "error x100", "initial x100", "points", "excluded"], rows))
            if report.mean_error is not None:
                self.write(self.stdout, f"mean error x100: { report.mean_error:.6g}\n")
        failed = [t.name for t in report.targets if t.status != "ok"]
        if failed:
            raise InputError(f"{ len(failed) } of { len(report.targets) } targets failed: { ', '.join(failed) }")


def to_text_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def main() -> None:
    # Docstring must start on second line so dedenting works correctly
    """
    Call this to run the command line.  It passes in sys.argv[1:] and
    exits Python with the command's exit code.
    """
    sys.exit(Shell().run(sys.argv[1:]))


if __name__ == '__main__':
    main()

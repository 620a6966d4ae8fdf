from django.core.management.base import CommandError

from apps.harness.management.base import LabCommand
from apps.harness.records import write_json
from apps.harness.services.experiment_service import experiment_service
from apps.theory.services.report_service import theory_report_service
from apps.theory.types import TheoryConfig


class Command(LabCommand):
    help = "Runs the contraction, regret and detection-bound checks and writes theory_report.json."

    def add_arguments(self, parser):
        parser.add_argument(
            "--skip-neural",
            action="store_true",
            help="Only run the quadratic checks; no pretraining is needed.",
        )
        super().add_arguments(parser)

    def run(self, **options):
        config = self.load(options["config"], options["overrides"])
        cfg = config.theory or TheoryConfig.for_classes(config.net.n_classes)

        neural = {}
        if not options["skip_neural"]:
            seed = config.seed(0)
            theta = experiment_service.pretrained(config, seed)
            neural = {
                "scfg": config.stream,
                "det": experiment_service.detector_for(config, theta, seed),
                "theta": theta,
                "net": config.net,
                "hp": config.hp,
            }
        checks = theory_report_service.run_theory_checks(cfg=cfg, **neural)

        for check in checks:
            style = self.style.SUCCESS if check.passed else self.style.ERROR
            self.stdout.write(
                style(f"{check.name:>28}  measured={check.measured:.6g}  target={check.target:.6g}")
            )

        path = config.output_dir / "theory_report.json"
        write_json(path, theory_report_service.to_payload(checks))
        self.stdout.write(self.style.NOTICE(f"Report written to {path}"))

        failed = [check.name for check in checks if not check.passed]
        if failed:
            raise CommandError(
                f"{len(failed)} theory checks failed: {', '.join(failed)}", returncode=1
            )

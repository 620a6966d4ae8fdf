from apps.harness.management.base import LabCommand
from apps.harness.services.experiment_service import experiment_service


class Command(LabCommand):
    help = "Prints the switch threshold ell and the calibrated shift threshold tau per seed."

    def run(self, **options):
        config = self.load(options["config"], options["overrides"])
        spec = config.detector
        self.stdout.write(
            self.style.NOTICE(
                f"delta={spec.delta} energy_sign={spec.energy_sign} coverage={spec.coverage} "
                f"supports={experiment_service.calibration_supports}"
            )
        )

        for index in range(config.n_seeds):
            seed = config.seed(index)
            theta = experiment_service.pretrained(config, seed)
            det = experiment_service.detector_for(config, theta, seed)
            self.stdout.write(f"seed {seed}: ell={det.ell:.6f} tau={det.tau:.6f}")
        self.stdout.write(self.style.SUCCESS("Calibration finished."))
